"""Codebook learning and semantic-id assignment.

Four ways to build the per-level codebooks: a jointly trained
encoder/quantizer/decoder (rqvae), residual k-means with no neural nets
(rqkmeans), one independent encoder-plus-codebook per level (multivq), and a
content-blind uniform baseline (random).  Assignment is always greedy
nearest-neighbor per level; rqvae and rqkmeans quantize residuals, multivq
quantizes each level's own encoding of the original embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamW, Tensor, cosine_warmup_lr
from .catalog import SemanticId, SidStructure
from .errors import DataError, NumericError


# ---------------------------------------------------------------------------
# MLP


@dataclass(eq=False)
class Mlp:
    """Fully connected net with rectifier activations between hidden layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(f"layer {i} output dim does not feed layer {i + 1}")
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias length must equal layer output dim")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("mlp parameters must be finite")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h


def init_mlp(dims, rng: np.random.Generator) -> Mlp:
    """He-scaled gaussian weights, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("an mlp needs at least input and output dims")
    weights = [
        rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(2.0 / dims[i])
        for i in range(len(dims) - 1)
    ]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    return Mlp(weights, biases)


def _forward_t(weights: list[Tensor], biases: list[Tensor], x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = h.relu()
    return h


# ---------------------------------------------------------------------------
# Codebooks and residual assignment


@dataclass(eq=False)
class CodebookStack:
    """One table per level; level j holds structure.level_sizes[j] rows."""

    structure: SidStructure
    levels: list[np.ndarray]

    def __post_init__(self):
        if len(self.levels) != self.structure.num_levels:
            raise ValueError("one codebook table required per level")
        dims = set()
        for j, (table, n_j) in enumerate(zip(self.levels, self.structure.level_sizes)):
            table = np.asarray(table, dtype=np.float64)
            if table.ndim != 2 or table.shape[0] != n_j:
                raise ValueError(f"level {j} table must have {n_j} rows")
            if not np.isfinite(table).all():
                raise ValueError(f"level {j} table has non-finite entries")
            self.levels[j] = table
            dims.add(table.shape[1])
        if len(dims) != 1:
            raise ValueError("all levels must share one vector dim")

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


def nearest_row(table: np.ndarray, z: np.ndarray) -> int:
    """Index of the Euclidean-nearest row; ties resolve to the lowest index."""
    if table.shape[0] == 0:
        raise DataError("empty codebook level")
    d2 = ((table - z) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def residual_assign(z1: np.ndarray, codebooks: CodebookStack) -> tuple[SemanticId, list[np.ndarray]]:
    """Greedy per-level quantization of z1 and its running residuals.

    Level j picks the codeword nearest the current residual, which is then
    subtracted.  Returns the code tuple and the residual trace z_1 .. z_{m+1};
    the chosen codewords plus the final residual telescope back to z1 exactly.
    """
    z = np.asarray(z1, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != codebooks.dim:
        raise DataError(f"input dim {z.shape} does not match codebook dim {codebooks.dim}")
    residuals = [z]
    codes = []
    for table in codebooks.levels:
        c = nearest_row(table, z)
        codes.append(c)
        z = z - table[c]
        residuals.append(z)
    return SemanticId(tuple(codes)), residuals


def residual_assign_batch(Z: np.ndarray, codebooks: CodebookStack) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized residual_assign: (N, m) int codes and (N, d) final residuals."""
    Z = np.asarray(Z, dtype=np.float64)
    codes = np.zeros((Z.shape[0], codebooks.structure.num_levels), dtype=np.int64)
    for j, table in enumerate(codebooks.levels):
        if table.shape[0] == 0:
            raise DataError("empty codebook level")
        d2 = ((Z[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
        codes[:, j] = np.argmin(d2, axis=1)
        Z = Z - table[codes[:, j]]
    return codes, Z


# ---------------------------------------------------------------------------
# K-means (used by rqkmeans and for codebook init)


def kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance sampling."""
    n = X.shape[0]
    if n == 0:
        raise DataError("cannot seed centroids from zero points")
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on existing centroids; reuse points round-robin
            centroids[i] = X[i % n]
            continue
        centroids[i] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[i]) ** 2).sum(axis=1))
    return centroids


def lloyd_kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's iterations from a k-means++ seed.

    Returns (centroids, labels, per-iteration objective).  The objective (sum
    of squared distances to the assigned centroid) never increases: an empty
    cluster captures the point currently farthest from its centroid, which
    cannot raise the total.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("k-means needs at least one point")
    centroids = kmeanspp_init(X, k, rng)
    objective_trace: list[float] = []
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        costs = d2[np.arange(X.shape[0]), labels]
        objective_trace.append(float(costs.sum()))
        costs = costs.copy()
        new_centroids = centroids.copy()
        for c in range(k):
            mask = labels == c
            if mask.any():
                new_centroids[c] = X[mask].mean(axis=0)
            else:
                # empty cluster captures the worst-served point; objective
                # cannot increase and repeated captures pick distinct points
                farthest = int(np.argmax(costs))
                new_centroids[c] = X[farthest]
                labels[farthest] = c
                costs[farthest] = 0.0
        if np.allclose(new_centroids, centroids, rtol=0.0, atol=0.0):
            break
        centroids = new_centroids
        if len(objective_trace) >= 2 and objective_trace[-2] - objective_trace[-1] < tol:
            break
    return centroids, labels, objective_trace


# ---------------------------------------------------------------------------
# Model container


@dataclass(eq=False)
class QuantizerModel:
    """A trained quantizer: codebooks plus whatever nets the kind requires."""

    kind: str
    codebooks: CodebookStack
    seed: int
    encoder: Mlp | None = None
    decoder: Mlp | None = None
    level_encoders: list[Mlp] | None = None
    recon_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    objective_traces: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("rqvae", "rqkmeans", "multivq", "random"):
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.kind == "rqvae" and (self.encoder is None or self.decoder is None):
            raise ValueError("rqvae model requires encoder and decoder")
        if self.kind == "multivq":
            if not self.level_encoders or len(self.level_encoders) != self.structure.num_levels:
                raise ValueError("multivq model requires one encoder per level")
        if self.kind in ("rqkmeans", "random") and (self.encoder or self.decoder):
            raise ValueError(f"{self.kind} model carries no nets")

    @property
    def structure(self) -> SidStructure:
        return self.codebooks.structure

    def latent(self, embedding: np.ndarray) -> np.ndarray:
        """The vector the level-1 codebook quantizes for this embedding."""
        if self.kind == "rqvae":
            return self.encoder.forward(np.asarray(embedding, dtype=np.float64))
        if self.kind in ("rqkmeans",):
            return np.asarray(embedding, dtype=np.float64)
        raise DataError(f"{self.kind} quantizer has no single latent space")

    def assign(self, embedding: np.ndarray) -> SemanticId:
        """Content-based semantic id for one embedding."""
        if self.kind in ("rqvae", "rqkmeans"):
            sid, _ = residual_assign(self.latent(embedding), self.codebooks)
            return sid
        if self.kind == "multivq":
            codes = []
            for enc, table in zip(self.level_encoders, self.codebooks.levels):
                z = enc.forward(np.asarray(embedding, dtype=np.float64))
                codes.append(nearest_row(table, z))
            return SemanticId(tuple(codes))
        raise DataError("random quantizer assigns by item id, not content; use assign_random")

    def assign_batch(self, X: np.ndarray) -> np.ndarray:
        """Codes for a matrix of embeddings, shape (N, m)."""
        X = np.asarray(X, dtype=np.float64)
        if self.kind in ("rqvae", "rqkmeans"):
            Z = self.encoder.forward(X) if self.kind == "rqvae" else X
            codes, _ = residual_assign_batch(Z, self.codebooks)
            return codes
        if self.kind == "multivq":
            cols = []
            for enc, table in zip(self.level_encoders, self.codebooks.levels):
                Z = enc.forward(X)
                d2 = ((Z[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
                cols.append(np.argmin(d2, axis=1))
            return np.stack(cols, axis=1)
        raise DataError("random quantizer assigns by item id, not content; use assign_random")

    def rank_last_level(self, embedding: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
        """Prefix codes plus every last-level code ordered by residual distance.

        The collision-repair policies walk this ranking; ties in distance
        resolve to the lower code so the order is total and reproducible.
        """
        prefixes, orders = self.rank_last_level_batch(np.asarray(embedding)[None, :])
        return tuple(int(c) for c in prefixes[0]), orders[0]

    def rank_last_level_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched rank_last_level: (N, m-1) prefixes and (N, n_m) orderings."""
        X = np.asarray(X, dtype=np.float64)
        m = self.structure.num_levels
        last_table = self.codebooks.levels[-1]
        if self.kind in ("rqvae", "rqkmeans"):
            Z = self.encoder.forward(X) if self.kind == "rqvae" else X
            prefixes = np.zeros((X.shape[0], m - 1), dtype=np.int64)
            for j, table in enumerate(self.codebooks.levels[: m - 1]):
                d2 = ((Z[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
                prefixes[:, j] = np.argmin(d2, axis=1)
                Z = Z - table[prefixes[:, j]]
        elif self.kind == "multivq":
            cols = []
            for enc, table in zip(self.level_encoders[: m - 1], self.codebooks.levels[: m - 1]):
                Ze = enc.forward(X)
                d2 = ((Ze[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
                cols.append(np.argmin(d2, axis=1))
            prefixes = (
                np.stack(cols, axis=1) if cols else np.zeros((X.shape[0], 0), dtype=np.int64)
            )
            Z = self.level_encoders[-1].forward(X)
        else:
            raise DataError("random quantizer cannot rank codewords by content")
        d2_last = ((Z[:, None, :] - last_table[None, :, :]) ** 2).sum(axis=2)
        # stable argsort keeps equal distances in ascending-code order
        orders = np.argsort(d2_last, axis=1, kind="stable")
        return prefixes, orders

    def reconstruct(self, embedding: np.ndarray) -> np.ndarray:
        """Decoder output for the quantized representation (rqvae only)."""
        if self.kind != "rqvae":
            raise DataError(f"{self.kind} quantizer has no decoder")
        sid, residuals = residual_assign(self.latent(embedding), self.codebooks)
        quantized = residuals[0] - residuals[-1]
        return self.decoder.forward(quantized)


# ---------------------------------------------------------------------------
# RQ-VAE training


@dataclass
class RqvaeConfig:
    """Training schedule; the production-scale defaults are 150 epochs, warmup
    40, lr 2e-4, batch 2048, hidden dims (256, 256).  Tests scale these down."""

    epochs: int = 150
    warmup_epochs: int = 40
    learning_rate: float = 2e-4
    batch_size: int = 2048
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    commitment_beta: float = 0.25
    hidden_dims: tuple[int, ...] = (256, 256)
    seed: int = 0


def _stack_embeddings(embeddings) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("need at least one embedding with consistent dims")
    if not np.isfinite(X).all():
        raise DataError("embeddings must be finite")
    return X


def _row_norms_t(diff: Tensor) -> Tensor:
    # sqrt is smoothed so a perfect reconstruction keeps a finite gradient
    return ((diff * diff).sum(axis=1) + 1e-12) ** 0.5


def rqvae_loss(
    enc_weights: list[Tensor],
    enc_biases: list[Tensor],
    dec_weights: list[Tensor],
    dec_biases: list[Tensor],
    level_tensors: list[Tensor],
    X: np.ndarray,
    codes: np.ndarray,
    commitment_beta: float,
    straight_through: bool = True,
) -> tuple[Tensor, Tensor]:
    """Total rqvae objective for a batch under FROZEN code assignments.

    Returns (total, reconstruction) where reconstruction is the mean Euclidean
    norm of decoder-output minus input.  The quantization total adds the
    codebook term ||sg[z] - r||^2 and beta times the commitment term
    ||z - sg[r]||^2.  With straight_through=True the decoder consumes the
    quantized sum while gradients pass to the encoder unchanged; with False
    the decoder input is the differentiable gather of chosen codewords, which
    is the configuration a finite-difference check can verify.
    """
    x_t = Tensor(X)
    z = _forward_t(enc_weights, enc_biases, x_t)
    quantized = None
    codebook_term = None
    commitment_term = None
    running = z
    for j, table in enumerate(level_tensors):
        r = table.gather_rows(codes[:, j])
        cb = ((running.detach() - r) * (running.detach() - r)).sum(axis=1).mean()
        cm = ((running - r.detach()) * (running - r.detach())).sum(axis=1).mean()
        codebook_term = cb if codebook_term is None else codebook_term + cb
        commitment_term = cm if commitment_term is None else commitment_term + cm
        quantized = r if quantized is None else quantized + r
        running = running - r.detach()
    if straight_through:
        dec_in = z + (quantized - z).detach()
    else:
        dec_in = quantized
    recon = _forward_t(dec_weights, dec_biases, dec_in)
    recon_loss = _row_norms_t(recon - x_t).mean()
    total = recon_loss + codebook_term + commitment_term * commitment_beta
    return total, recon_loss


def _init_codebooks_from_latents(
    Z: np.ndarray, structure: SidStructure, rng: np.random.Generator
) -> CodebookStack:
    """k-means++ seeds on the running residuals of the first batch."""
    levels = []
    residuals = Z.copy()
    for n_j in structure.level_sizes:
        table = kmeanspp_init(residuals, n_j, rng)
        levels.append(table)
        d2 = ((residuals[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
        residuals = residuals - table[np.argmin(d2, axis=1)]
    return CodebookStack(structure, levels)


def train_rqvae(embeddings, structure: SidStructure, config: RqvaeConfig) -> QuantizerModel:
    """Jointly train encoder, decoder, and codebooks on the embeddings.

    Deterministic per config.seed.  recon_trace[0] / loss_trace[0] hold the
    pre-training full-data evaluation; one entry per epoch follows.  Dead
    codewords (unused across a full epoch) are re-seeded from that epoch's
    last batch of residuals.
    """
    X = _stack_embeddings(embeddings)
    d_in = X.shape[1]
    rng = np.random.default_rng(config.seed)

    enc = init_mlp((d_in, *config.hidden_dims, structure.code_dim), rng)
    dec = init_mlp((structure.code_dim, *tuple(reversed(config.hidden_dims)), d_in), rng)
    enc_w = [Tensor(w) for w in enc.weights]
    enc_b = [Tensor(b) for b in enc.biases]
    dec_w = [Tensor(w) for w in dec.weights]
    dec_b = [Tensor(b) for b in dec.biases]

    batch_size = min(config.batch_size, X.shape[0])
    first = X[:batch_size]
    z_first = _forward_t(enc_w, enc_b, Tensor(first)).value
    codebooks = _init_codebooks_from_latents(z_first, structure, rng)
    level_tensors = [Tensor(t) for t in codebooks.levels]

    params = enc_w + enc_b + dec_w + dec_b + level_tensors
    optimizer = AdamW(params, lr=config.learning_rate, betas=config.betas, eps=config.eps)

    def evaluate_full() -> tuple[float, float]:
        z_all = _forward_t(enc_w, enc_b, Tensor(X)).value
        stack = CodebookStack(structure, [t.value.copy() for t in level_tensors])
        codes, _ = residual_assign_batch(z_all, stack)
        total, recon = rqvae_loss(
            enc_w, enc_b, dec_w, dec_b, level_tensors, X, codes, config.commitment_beta
        )
        return total.item(), recon.item()

    total0, recon0 = evaluate_full()
    loss_trace, recon_trace = [total0], [recon0]

    for epoch in range(config.epochs):
        optimizer.lr = cosine_warmup_lr(
            epoch, config.learning_rate, config.warmup_epochs, config.epochs
        )
        order = rng.permutation(X.shape[0])
        epoch_total, epoch_recon, seen = 0.0, 0.0, 0
        used = [np.zeros(n, dtype=bool) for n in structure.level_sizes]
        last_z, last_codes = None, None
        for start in range(0, X.shape[0], batch_size):
            idx = order[start : start + batch_size]
            batch = X[idx]
            z_b = _forward_t(enc_w, enc_b, Tensor(batch)).value
            stack = CodebookStack(structure, [t.value.copy() for t in level_tensors])
            codes, _ = residual_assign_batch(z_b, stack)
            for j in range(structure.num_levels):
                used[j][codes[:, j]] = True
            last_z, last_codes = z_b, codes
            total, recon = rqvae_loss(
                enc_w, enc_b, dec_w, dec_b, level_tensors, batch, codes, config.commitment_beta
            )
            if not np.isfinite(total.value):
                raise NumericError(f"rqvae loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_total += total.item() * idx.size
            epoch_recon += recon.item() * idx.size
            seen += idx.size
        loss_trace.append(epoch_total / seen)
        recon_trace.append(epoch_recon / seen)
        # revive codewords nothing selected this epoch, seeded from the last
        # batch's residuals at the matching level
        if last_z is not None:
            for j, table in enumerate(level_tensors):
                dead = np.nonzero(~used[j])[0]
                if not dead.size:
                    continue
                res_j = last_z.copy()
                for k in range(j):
                    res_j -= level_tensors[k].value[last_codes[:, k]]
                picks = rng.integers(res_j.shape[0], size=dead.size)
                table.value[dead] = res_j[picks]

    final_enc = Mlp([t.value.copy() for t in enc_w], [t.value.copy() for t in enc_b])
    final_dec = Mlp([t.value.copy() for t in dec_w], [t.value.copy() for t in dec_b])
    final_books = CodebookStack(structure, [t.value.copy() for t in level_tensors])
    return QuantizerModel(
        kind="rqvae",
        codebooks=final_books,
        seed=config.seed,
        encoder=final_enc,
        decoder=final_dec,
        recon_trace=recon_trace,
        loss_trace=loss_trace,
    )


# ---------------------------------------------------------------------------
# RQ-Kmeans


@dataclass
class RqkmeansConfig:
    iters_per_level: int = 100
    seed: int = 0


def train_rqkmeans(embeddings, structure: SidStructure, config: RqkmeansConfig) -> QuantizerModel:
    """Level-by-level k-means over running residuals; no neural nets.

    Each level runs Lloyd's iterations to convergence (or the iteration cap)
    on the residuals the previous levels left behind.
    """
    X = _stack_embeddings(embeddings)
    rng = np.random.default_rng(config.seed)
    residuals = X.copy()
    levels, traces = [], []
    for n_j in structure.level_sizes:
        centroids, labels, trace = lloyd_kmeans(residuals, n_j, rng, config.iters_per_level)
        levels.append(centroids)
        traces.append(trace)
        residuals = residuals - centroids[labels]
    return QuantizerModel(
        kind="rqkmeans",
        codebooks=CodebookStack(structure, levels),
        seed=config.seed,
        objective_traces=traces,
    )


# ---------------------------------------------------------------------------
# Multiple-VQ


def train_multivq(embeddings, structure: SidStructure, config: RqvaeConfig) -> QuantizerModel:
    """One independent encoder + codebook per level, no residual chaining.

    Every level trains a single-level vector quantizer against the ORIGINAL
    embeddings with the same seed and schedule, so on identical data the
    levels come out identical.  The per-level decoders only exist during
    training; assignment needs just the encoders and codebooks.
    """
    X = _stack_embeddings(embeddings)
    encoders, tables = [], []
    recon_traces = []
    for n_j in structure.level_sizes:
        level_structure = SidStructure((n_j,), code_dim=structure.code_dim)
        sub = train_rqvae(X, level_structure, config)
        encoders.append(sub.encoder)
        tables.append(sub.codebooks.levels[0])
        recon_traces.append(sub.recon_trace)
    return QuantizerModel(
        kind="multivq",
        codebooks=CodebookStack(structure, tables),
        seed=config.seed,
        level_encoders=encoders,
        objective_traces=recon_traces,
    )


# ---------------------------------------------------------------------------
# Random baseline


def assign_random(item_ids, structure: SidStructure, seed: int) -> dict[str, SemanticId]:
    """Uniform independent codes per level per item; deterministic per seed."""
    rng = np.random.default_rng(seed)
    ids = list(item_ids)
    draws = np.stack(
        [rng.integers(n_j, size=len(ids)) for n_j in structure.level_sizes], axis=1
    )
    return {
        item_id: SemanticId(tuple(int(c) for c in row)) for item_id, row in zip(ids, draws)
    }


def random_model(structure: SidStructure, seed: int) -> QuantizerModel:
    """Container for the random baseline (zero codebooks, no nets)."""
    levels = [np.zeros((n_j, structure.code_dim)) for n_j in structure.level_sizes]
    return QuantizerModel(
        kind="random", codebooks=CodebookStack(structure, levels), seed=seed
    )


# ---------------------------------------------------------------------------
# Feature fidelity


def fidelity_percent(original: np.ndarray, reconstructed: np.ndarray) -> np.ndarray:
    """Per-row max(0, 1 - ||H - H_hat|| / ||H||) * 100."""
    original = np.atleast_2d(np.asarray(original, dtype=np.float64))
    reconstructed = np.atleast_2d(np.asarray(reconstructed, dtype=np.float64))
    norms = np.linalg.norm(original, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DataError(f"zero-norm embedding at row {int(zero[0])}")
    err = np.linalg.norm(original - reconstructed, axis=1)
    return np.maximum(0.0, 1.0 - err / norms) * 100.0


def feature_fidelity(model: QuantizerModel, embeddings) -> float:
    """Mean reconstruction fidelity of the quantized representation, in percent."""
    if model.kind != "rqvae":
        raise DataError("feature fidelity needs a decoder; only rqvae models have one")
    X = _stack_embeddings(embeddings)
    Z = model.encoder.forward(X)
    _, final_res = residual_assign_batch(Z, model.codebooks)
    quantized = Z - final_res
    recon = model.decoder.forward(quantized)
    return float(fidelity_percent(X, recon).mean())


# ---------------------------------------------------------------------------
# Serialization


def _write_matrix(fh, matrix: np.ndarray) -> None:
    for row in np.atleast_2d(matrix):
        fh.write("\t".join(repr(float(x)) for x in row) + "\n")


def _write_mlp(fh, tag: str, mlp: Mlp) -> None:
    fh.write(f"#mlp\t{tag}\n")
    for w, b in zip(mlp.weights, mlp.biases):
        fh.write(f"#layer\t{w.shape[0]}\t{w.shape[1]}\n")
        _write_matrix(fh, w)
        _write_matrix(fh, b)


def save_quantizer(model: QuantizerModel, path) -> None:
    """TSV sections: header, per-level codebooks, then any mlps."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#kind\t{model.kind}\n")
        fh.write(f"#seed\t{model.seed}\n")
        fh.write("#levels\t" + "\t".join(str(n) for n in model.structure.level_sizes) + "\n")
        fh.write(f"#code_dim\t{model.structure.code_dim}\n")
        for j, table in enumerate(model.codebooks.levels):
            fh.write(f"#codebook\t{j}\n")
            _write_matrix(fh, table)
        if model.encoder is not None:
            _write_mlp(fh, "encoder", model.encoder)
        if model.decoder is not None:
            _write_mlp(fh, "decoder", model.decoder)
        if model.level_encoders:
            for j, enc in enumerate(model.level_encoders):
                _write_mlp(fh, f"encoder{j}", enc)


def load_quantizer(path) -> QuantizerModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header: dict[str, list[str]] = {}
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#") and lines[pos].split("\t")[0] in (
        "#kind",
        "#seed",
        "#levels",
        "#code_dim",
    ):
        parts = lines[pos].split("\t")
        header[parts[0][1:]] = parts[1:]
        pos += 1
    try:
        kind = header["kind"][0]
        seed = int(header["seed"][0])
        level_sizes = tuple(int(x) for x in header["levels"])
        code_dim = int(header["code_dim"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"malformed quantizer header in {path}: {exc}") from exc
    structure = SidStructure(level_sizes, code_dim=code_dim)

    def read_matrix(rows: int) -> np.ndarray:
        nonlocal pos
        if pos + rows > len(lines):
            raise DataError(f"truncated quantizer file {path}")
        block = [
            [float(x) for x in lines[pos + r].split("\t")] for r in range(rows)
        ]
        pos += rows
        return np.asarray(block, dtype=np.float64)

    tables: list[np.ndarray] = []
    mlps: dict[str, Mlp] = {}
    while pos < len(lines):
        parts = lines[pos].split("\t")
        if parts[0] == "#codebook":
            pos += 1
            tables.append(read_matrix(level_sizes[len(tables)]))
        elif parts[0] == "#mlp":
            tag = parts[1]
            pos += 1
            weights, biases = [], []
            while pos < len(lines) and lines[pos].startswith("#layer"):
                _, n_in, n_out = lines[pos].split("\t")
                pos += 1
                weights.append(read_matrix(int(n_in)))
                biases.append(read_matrix(1)[0])
            mlps[tag] = Mlp(weights, biases)
        else:
            raise DataError(f"unexpected line {pos + 1} in quantizer file {path}")
    if len(tables) != len(level_sizes):
        raise DataError(f"quantizer file {path} is missing codebook sections")
    level_encoders = None
    if kind == "multivq":
        level_encoders = [mlps[f"encoder{j}"] for j in range(len(level_sizes))]
    return QuantizerModel(
        kind=kind,
        codebooks=CodebookStack(structure, tables),
        seed=seed,
        encoder=mlps.get("encoder"),
        decoder=mlps.get("decoder"),
        level_encoders=level_encoders,
    )
