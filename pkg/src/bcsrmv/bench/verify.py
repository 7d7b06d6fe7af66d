"""Self-contained verification suite driven by `bench verify`.

Each check compares a kernel against an independent oracle (dense linear
algebra, brute-force enumeration or finite differences) at a reduced
problem size derived from the configuration.  Exit code 0 means every
check passed.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..bcsr import (
    BlockCsrMatrix,
    group_rows_by_block,
    mmult,
    scale_add,
    serial_matrix,
    tmmult,
    tr_tmmult,
)
from ..blocks import BlockIndices, BlockSparsityPattern
from ..comm import run_ranks
from ..counters import OpCounters
from ..energy import compute_energy, compute_gradient, directional_derivative
from ..hilbert import hilbert_index
from ..matfree import (
    GEMM,
    SUMFAC,
    RowsBlockAccessor,
    assemble_reference,
    build_cell_dof_map_from_rows,
    hamiltonian_operator,
    mass_operator,
)
from .config import BenchConfig
from .problem import dense_phi, fill_multivector, generate_problem
from .runner import _RankSetup


def _reduced_config(cfg: BenchConfig, n_ranks: int | None = None) -> BenchConfig:
    return replace(
        cfg,
        atoms=min(cfg.atoms, 6),
        rings=min(cfg.rings, 3),
        degree=min(cfg.degree, 3),
        spacing=[4.0, 4.0, 4.0],
        extents=None,
        radius=min(cfg.radius, 6.0),
        block_size=min(cfg.block_size, 4),
        n_ranks=n_ranks if n_ranks is not None else cfg.n_ranks,
        reps=1,
    )


def _random_potential(seed: int):
    def v(points):
        return np.cos(points @ np.asarray([0.7, 1.3, 0.4]) + seed)

    return v


def check_operator_oracle(cfg: BenchConfig, inject_fault: bool = False):
    """apply_operator vs the assembled matrix, both variants, both kinds."""
    prob = generate_problem(_reduced_config(cfg, n_ranks=1))
    specs = [
        ("mass", mass_operator()),
        ("hamiltonian", hamiltonian_operator(_random_potential(cfg.seed))),
    ]
    mask = prob.grown.entry_mask()
    phi_dense = dense_phi(prob)
    worst = 0.0
    details = []
    for kind, spec in specs:
        a_ref = assemble_reference(prob.mesh, prob.numbering, spec)
        expected = np.where(mask, a_ref @ phi_dense, 0.0)
        scale = np.linalg.norm(expected)
        for variant in (SUMFAC, GEMM):

            def program(ctx):
                setup = _RankSetup(ctx, prob)
                dst = BlockCsrMatrix(
                    prob.grown, setup.row_layout, ctx, prob.cfg.lane_width
                )
                setup.op.apply(spec, setup.phi, dst, variant=variant)
                if inject_fault:
                    pos = 0
                    dst.block_valid(pos)[0, 0] += 1.0
                return dst.to_dense_owned()

            got = run_ranks(1, program)[0]
            err = np.linalg.norm(got - expected) / scale
            worst = max(worst, err)
            if err > 1e-12:
                diff = np.abs(got - expected)
                i, j = np.unravel_index(np.argmax(diff), diff.shape)
                rb = prob.numbering.row_blocks.global_to_block(int(i))[0]
                cb = prob.loc_layout.column_blocks.global_to_block(int(j))[0]
                details.append(
                    f"{kind}/{variant}: rel err {err:.2e} located at block "
                    f"({rb}, {cb})"
                )
    if details:
        return False, "; ".join(details)
    return True, f"worst relative error {worst:.2e} (tol 1e-12)"


def check_spmm_oracle(cfg: BenchConfig):
    """mmult/tmmult/tr_tmmult vs dense products on random serial setups."""
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    for trial in range(8):
        rb = BlockIndices(rng.integers(1, 7, size=rng.integers(2, 5)))
        cb = BlockIndices(rng.integers(1, 5, size=rng.integers(2, 4)))
        kb = BlockIndices(rng.integers(1, 5, size=rng.integers(2, 4)))

        def rand_pattern(rows, cols):
            lists = []
            for _ in range(rows.n_blocks):
                take = rng.random(cols.n_blocks) < 0.6
                lists.append(np.flatnonzero(take))
            return BlockSparsityPattern(rows, cols, lists)

        a = serial_matrix(rand_pattern(rb, kb))
        b = serial_matrix(rand_pattern(kb, cb))
        c = serial_matrix(rand_pattern(rb, cb))
        for m in (a, b):
            m.fill_owned(lambda r, c_: rng.random((r.size, c_.size)) - 0.5)
        b.update_ghost_values()
        mmult(a, b, c)
        expect = (a.to_dense_owned() @ b.to_dense_owned()) * c.pattern.entry_mask()
        scale = max(np.linalg.norm(expect), 1.0)
        worst = max(worst, np.linalg.norm(c.to_dense_owned() - expect) / scale)

        a2 = serial_matrix(rand_pattern(rb, kb))
        b2 = serial_matrix(rand_pattern(rb, cb))
        for m in (a2, b2):
            m.fill_owned(lambda r, c_: rng.random((r.size, c_.size)) - 0.5)
        prod = BlockSparsityPattern(
            kb,
            cb,
            [np.arange(cb.n_blocks)] * kb.n_blocks,
        )
        c2 = serial_matrix(prod)
        tmmult(a2, b2, c2)
        expect2 = a2.to_dense_owned().T @ b2.to_dense_owned()
        scale2 = max(np.linalg.norm(expect2), 1.0)
        worst = max(worst, np.linalg.norm(c2.to_dense_owned() - expect2) / scale2)

        got_tr = tr_tmmult(a2, a2)
        want_tr = float(np.sum(a2.to_dense_owned() ** 2))
        worst = max(worst, abs(got_tr - want_tr) / max(abs(want_tr), 1.0))
    ok = worst <= 1e-12
    return ok, f"worst relative error {worst:.2e} over 24 products (tol 1e-12)"


def check_ghost_blocking(cfg: BenchConfig):
    """The documented 9-row grouping plus random grouping oracles."""
    blocking = BlockIndices([15, 6, 6, 8, 10])  # boundaries at 15, 21, 27, 35
    rows = [15, 17, 19, 21, 23, 28, 30, 32, 35]
    groups = group_rows_by_block(rows, blocking)
    sizes = [len(r) for _, r in groups]
    if sizes != [3, 2, 3, 1]:
        return False, f"expected ghost groups (3, 2, 3, 1), got {tuple(sizes)}"
    rng = np.random.default_rng(cfg.seed)
    for _ in range(25):
        blocks = BlockIndices(rng.integers(1, 9, size=rng.integers(2, 8)))
        n = blocks.total
        ghosts = np.flatnonzero(rng.random(n) < 0.3)
        got = group_rows_by_block(ghosts, blocks)
        want = {}
        for r in ghosts:
            want.setdefault(blocks.global_to_block(int(r))[0], []).append(int(r))
        if [(b, list(r)) for b, r in got] != sorted(
            (b, sorted(v)) for b, v in want.items()
        ):
            return False, "random grouping disagrees with brute force"
    return True, "fig-style scenario groups as (3, 2, 3, 1); 25 random oracles agree"


def check_accessor_merge(cfg: BenchConfig):
    """Accessor column sequence vs a k-way merge of the row lists."""
    rng = np.random.default_rng(cfg.seed)
    # the documented configuration: rows {8,0,2,3}, rows 0 and 2 empty,
    # row 3 starting at the second column block
    rb = BlockIndices([4, 2, 2, 2, 2, 2, 2, 2, 3])
    cb = BlockIndices([2, 2])
    lists = [[] for _ in range(9)]
    lists[8] = [0, 1]
    lists[3] = [1]
    pattern = BlockSparsityPattern(rb, cb, lists)
    mat = serial_matrix(pattern)
    cell_rows = [
        [rb.block_start(8) + 0, rb.block_start(8) + 1, rb.block_start(0) + 1,
         rb.block_start(2) + 0, rb.block_start(0) + 3, rb.block_start(3) + 0,
         rb.block_start(8) + 2, rb.block_start(2) + 1, rb.block_start(3) + 1]
    ]
    cmap = build_cell_dof_map_from_rows(cell_rows, mat.layout.map_rows)
    acc = RowsBlockAccessor(mat, cmap)
    if acc.emitted_columns(0) != [0, 1]:
        return False, "documented configuration emitted a wrong column sequence"
    for _ in range(10):
        nrb = rng.integers(2, 6)
        ncb = rng.integers(1, 6)
        rb2 = BlockIndices(rng.integers(1, 4, size=nrb))
        cb2 = BlockIndices(rng.integers(1, 3, size=ncb))
        lists2 = [
            np.flatnonzero(rng.random(ncb) < 0.5) for _ in range(nrb)
        ]
        mat2 = serial_matrix(BlockSparsityPattern(rb2, cb2, lists2))
        rows2 = [rb2.block_start(b) for b in range(nrb)]
        cmap2 = build_cell_dof_map_from_rows([rows2], mat2.layout.map_rows)
        acc2 = RowsBlockAccessor(mat2, cmap2)
        want = sorted(set(int(c) for lst in lists2 for c in lst))
        if acc2.emitted_columns(0) != want:
            return False, "random pattern emitted a wrong column sequence"
    return True, "documented and 10 random patterns match the k-way merge"


def check_symmetry(cfg: BenchConfig):
    """Projected matrices are symmetric to 1e-12 relative."""
    red = _reduced_config(cfg, n_ranks=min(cfg.n_ranks, 4))
    prob = generate_problem(red)

    def program(ctx):
        setup = _RankSetup(ctx, prob)
        compute_energy(setup.op, setup.spec_m, setup.spec_h, setup.phi, setup.ws)
        return setup.ws.mbar.to_dense_owned(), setup.ws.hbar.to_dense_owned()

    parts = run_ranks(red.n_ranks, program)
    worst = 0.0
    for idx in range(2):
        dense = np.sum([p[idx] for p in parts], axis=0)
        worst = max(
            worst,
            np.linalg.norm(dense - dense.T) / np.linalg.norm(dense),
        )
    ok = worst <= 1e-12
    return ok, f"worst asymmetry {worst:.2e} on {red.n_ranks} ranks (tol 1e-12)"


def check_gradient_fd(cfg: BenchConfig, eps: float = 1e-5):
    """Directional derivative vs central differences."""
    red = _reduced_config(cfg, n_ranks=1)
    prob = generate_problem(red)

    def program(ctx):
        setup = _RankSetup(ctx, prob)
        compute_energy(setup.op, setup.spec_m, setup.spec_h, setup.phi, setup.ws)
        g = compute_gradient(setup.ws)
        d = BlockCsrMatrix(prob.pattern, setup.row_layout, ctx, red.lane_width)
        fill_multivector(d, prob.loc_layout, red.seed + 17, prob.supports)
        slope = directional_derivative(d, g)
        energies = []
        for sign in (1.0, -1.0):
            shifted = setup.phi.copy()
            scale_add(shifted, 1.0, d, sign * eps)
            energies.append(
                compute_energy(
                    setup.op, setup.spec_m, setup.spec_h, shifted, setup.ws
                )
            )
        fd = (energies[0] - energies[1]) / (2 * eps)
        return slope, fd

    slope, fd = run_ranks(1, program)[0]
    err = abs(slope - fd) / max(1.0, abs(slope))
    ok = err <= 1e-6
    return ok, f"slope {slope:.6e} vs central difference {fd:.6e}, rel err {err:.2e}"


def _pipeline_outputs(prob):
    def program(ctx):
        setup = _RankSetup(ctx, prob)
        e = compute_energy(setup.op, setup.spec_m, setup.spec_h, setup.phi, setup.ws)
        compute_gradient(setup.ws)
        old = prob.loc_layout.old_col_of_new
        g = setup.ws.g.to_dense_owned()
        g_orig = np.zeros_like(g)
        g_orig[:, old] = g
        hbar = setup.ws.hbar.to_dense_owned()
        hb_orig = np.zeros_like(hbar)
        hb_orig[np.ix_(old, old)] = hbar
        gmask = setup.ws.g.pattern.entry_mask()
        gmask_orig = np.zeros_like(gmask)
        gmask_orig[:, old] = gmask
        return e, g_orig, hb_orig, gmask_orig

    return program


def check_rank_invariance(cfg: BenchConfig):
    """E, G and Hbar agree between 1 rank and the configured rank count.

    The gradient is compared on the entries stored under both blockings;
    outside that set it is defined by the (blocking-dependent) truncation
    of the post-multiplications.
    """
    n = min(max(cfg.n_ranks, 2), 4)
    baseline_prob = generate_problem(_reduced_config(cfg, n_ranks=1))
    multi_prob = generate_problem(_reduced_config(cfg, n_ranks=n))
    base = run_ranks(1, _pipeline_outputs(baseline_prob))[0]
    multi_parts = run_ranks(n, _pipeline_outputs(multi_prob))
    e0, g0, h0, gm0 = base
    e1 = multi_parts[0][0]
    g1 = np.sum([p[1] for p in multi_parts], axis=0)
    h1 = np.sum([p[2] for p in multi_parts], axis=0)
    common = gm0 & multi_parts[0][3]
    errs = [
        abs(e1 - e0) / max(1.0, abs(e0)),
        np.linalg.norm((g1 - g0) * common)
        / max(np.linalg.norm(g0 * common), 1e-30),
        np.linalg.norm(h1 - h0) / max(np.linalg.norm(h0), 1e-30),
    ]
    worst = max(errs)
    ok = worst <= 1e-12
    return ok, f"worst relative deviation {worst:.2e} between 1 and {n} ranks"


def check_hilbert(cfg: BenchConfig):
    """Bijectivity and unit-step locality on full lattices."""
    for dim in (1, 2, 3):
        for levels in (1, 2, 3):
            n = 1 << levels
            pts = [
                (i, j, k)[:dim]
                for k in range(n if dim > 2 else 1)
                for j in range(n if dim > 1 else 1)
                for i in range(n)
            ]
            keys = [hilbert_index(p, levels) for p in pts]
            if len(set(keys)) != len(pts):
                return False, f"not injective for d={dim}, levels={levels}"
            order = sorted(range(len(pts)), key=lambda i: keys[i])
            for a, b in zip(order, order[1:]):
                dist = sum(abs(x - y) for x, y in zip(pts[a], pts[b]))
                if dist != 1:
                    return False, f"locality violated for d={dim}, levels={levels}"
    return True, "bijective with unit curve steps for d<=3, levels<=3"


CHECKS = (
    ("hilbert", check_hilbert),
    ("ghost_blocking", check_ghost_blocking),
    ("accessor_merge", check_accessor_merge),
    ("spmm_oracle", check_spmm_oracle),
    ("operator_oracle", check_operator_oracle),
    ("symmetry", check_symmetry),
    ("gradient_fd", check_gradient_fd),
    ("rank_invariance", check_rank_invariance),
)


def verify(cfg: BenchConfig, inject_fault: bool = False) -> tuple[bool, list]:
    """Run every check; returns (all passed, [(name, ok, detail), ...])."""
    results = []
    for name, fn in CHECKS:
        if name == "operator_oracle":
            ok, detail = fn(cfg, inject_fault=inject_fault)
        else:
            ok, detail = fn(cfg)
        results.append((name, ok, detail))
    return all(ok for _, ok, _ in results), results
