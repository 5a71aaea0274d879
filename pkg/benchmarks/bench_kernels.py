"""A/B timing of the compiled kernels against their pure-numpy twins.

The compiled (numba) versions replace the public kernel names at import
time, but the numpy implementations stay importable, so one process can
time both. JIT compilation is triggered before any timer starts.

Usage: python benchmarks/bench_kernels.py [--cells N] [--repeats R]
"""

import argparse
import timeit

import numpy as np
import scipy.sparse

from semfab import _kernels, mesh


def _time(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def _row(name, numpy_s, numba_s):
    if numba_s is None:
        print(f"{name:<22}  {numpy_s * 1e3:>9.2f} ms  {'-':>9}  {'-':>7}")
    else:
        print(
            f"{name:<22}  {numpy_s * 1e3:>9.2f} ms  "
            f"{numba_s * 1e3:>6.2f} ms  {numpy_s / numba_s:>6.1f}x"
        )


def bench_element_kernels(n_cells, repeats):
    side = max(2, round(n_cells ** (1 / 3)))
    m = mesh.generate_box_mesh(side, side, side, (1.0, 1.0, 1.0))
    rng = np.random.default_rng(0)
    young = rng.uniform(50.0, 200.0, m.n_elements)
    poisson = rng.uniform(0.0, 0.45, m.n_elements)
    conductivity = rng.uniform(0.5, 5.0, m.n_elements)
    print(f"element kernels on {m.n_elements} tets "
          f"({side}x{side}x{side} box)")

    pairs = [
        ("tet_volumes",
         lambda: _kernels._tet_volumes_numpy(m.vertices, m.tets),
         lambda: _kernels.tet_volumes(m.vertices, m.tets)),
        ("shape_data",
         lambda: _kernels._shape_data_numpy(m.vertices, m.tets),
         lambda: _kernels.shape_data(m.vertices, m.tets)),
        ("elasticity_matrices",
         lambda: _kernels._elasticity_matrices_numpy(
             m.vertices, m.tets, young, poisson),
         lambda: _kernels.elasticity_matrices(
             m.vertices, m.tets, young, poisson)),
        ("conduction_matrices",
         lambda: _kernels._conduction_matrices_numpy(
             m.vertices, m.tets, conductivity),
         lambda: _kernels.conduction_matrices(
             m.vertices, m.tets, conductivity)),
    ]
    for name, numpy_fn, numba_fn in pairs:
        numpy_s = _time(numpy_fn, repeats)
        numba_s = _time(numba_fn, repeats) if _kernels.NUMBA_ENABLED else None
        _row(name, numpy_s, numba_s)


def bench_pcg(n, repeats):
    # 3D 7-point Laplacian: same sparsity structure as the FEM systems
    side = max(2, round(n ** (1 / 3)))
    lap1 = scipy.sparse.diags(
        [-1.0, 2.0, -1.0], [-1, 0, 1], shape=(side, side))
    eye = scipy.sparse.identity(side)
    a = (
        scipy.sparse.kron(scipy.sparse.kron(lap1, eye), eye)
        + scipy.sparse.kron(scipy.sparse.kron(eye, lap1), eye)
        + scipy.sparse.kron(scipy.sparse.kron(eye, eye), lap1)
    ).tocsr()
    b = np.random.default_rng(1).standard_normal(a.shape[0])
    inv_diag = 1.0 / a.diagonal()
    x0 = np.zeros(a.shape[0])
    print(f"\npcg_csr on {a.shape[0]} unknowns (7-point Laplacian)")

    def run(fn):
        x, iters, hist, status = fn(
            a.indptr, a.indices, a.data, b, inv_diag, x0, 1e-8, 10 * side**3)
        assert status == _kernels.PCG_CONVERGED
        return x

    numpy_s = _time(lambda: run(_kernels._pcg_csr_numpy), repeats)
    numba_s = (
        _time(lambda: run(_kernels.pcg_csr), repeats)
        if _kernels.NUMBA_ENABLED else None
    )
    _row("pcg_csr", numpy_s, numba_s)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--cells", type=int, default=20000,
                        help="approximate hex cell count (6 tets per cell)")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _kernels.NUMBA_ENABLED:
        print("backend: numba (compiling kernels before timing)")
        _kernels.warmup()
    else:
        print("backend: pure numpy (numba unavailable or SEMFAB_NUMBA=0); "
              "timing numpy only")
    print(f"{'kernel':<22}  {'numpy':>12}  {'numba':>9}  {'speedup':>7}")
    bench_element_kernels(args.cells, args.repeats)
    bench_pcg(args.cells, args.repeats)


if __name__ == "__main__":
    main()
