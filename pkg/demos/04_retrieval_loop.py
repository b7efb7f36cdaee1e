"""
The full desk-scale retrieval loop
==================================

Tokenize a catalog, repair collisions, turn interaction logs into token
streams, fit a smoothed Markov scorer over them, and decode recommendations
with a width-scheduled beam.  Every number below is deterministic.
"""

from sidkit.catalog import SidStructure, render_sid_string
from sidkit.collision import apply_knn_policy, raw_assignment
from sidkit.quantizer import RqkmeansConfig, random_model, train_rqkmeans
from sidkit.retrieval import (
    BeamSchedule,
    build_useraction_corpus,
    dynamic_beam_search,
    evaluate_hr,
    sequence_context,
    train_markov_scorer,
)
from sidkit.toydata import ToyConfig, make_toy_world

world = make_toy_world(
    ToyConfig(n_items=1000, n_clusters=20, d_in=16, n_train_sequences=500,
              n_eval_sequences=100, seed=9)
)
structure = SidStructure((8, 8, 8), code_dim=16)

model = train_rqkmeans(
    world.catalog.embedding_matrix(), structure, RqkmeansConfig(iters_per_level=50, seed=0)
)
table = apply_knn_policy(world.catalog, model, sigma=25)

# histories and targets become one flat token stream per page view
corpus = build_useraction_corpus(world.train_sequences, table)
print(f"corpus: {len(corpus)} streams, e.g. {corpus[0]}")

scorer = train_markov_scorer(corpus, structure, order=3, alpha=0.1)

# decode the top SIDs for one held-out history
seq = world.eval_sequences[0]
context = sequence_context(table, seq.history)
schedule = BeamSchedule((8, 16, 32))
print(f"\nhistory {list(seq.history)} -> context tokens {context}")
for rank, (sid, logp) in enumerate(dynamic_beam_search(scorer, context, schedule, k=5), 1):
    members = table.items_for_sid(sid)
    print(f"  {rank}. {render_sid_string(sid, structure):>14s}  logp {logp:8.4f}  "
          f"{len(members)} items")

# hit rate against the held-out targets, wide beam vs greedy vs random SIDs
wide = evaluate_hr(scorer, table, world.eval_sequences, schedule, k_list=(1, 5, 20))
greedy = evaluate_hr(
    scorer, table, world.eval_sequences, BeamSchedule((1, 1, 1)), k_list=(1, 5, 20)
)
baseline_table = raw_assignment(world.catalog, random_model(structure, seed=0))
baseline_scorer = train_markov_scorer(
    build_useraction_corpus(world.train_sequences, baseline_table), structure,
    order=3, alpha=0.1,
)
baseline = evaluate_hr(
    baseline_scorer, baseline_table, world.eval_sequences, schedule, k_list=(1, 5, 20)
)

print(f"\n{'':12s} {'HR@1':>7s} {'HR@5':>7s} {'HR@20':>7s}")
for name, hr in (("wide beam", wide), ("greedy", greedy), ("random SIDs", baseline)):
    print(f"{name:12s} {hr[1]:7.3f} {hr[5]:7.3f} {hr[20]:7.3f}")
