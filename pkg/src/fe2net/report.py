"""Versioned CSV tables and matplotlib figures written by the command line tool."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

#: known table schemas and their current versions
SCHEMAS = {
    "rve_steps": 1,
    "stress_strain": 1,
    "tangent_stiffness": 1,
    "element_fields": 1,
    "nodal_displacement": 1,
    "bench": 1,
    "network_metrics": 1,
    "p2_distribution": 1,
}


class SchemaError(ValueError):
    """Unknown or mismatching table schema."""


def write_table(path, schema: str, columns, rows) -> Path:
    """Write ``# schema: <name> v<version>`` then a header and the rows."""
    if schema not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema!r}")
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: {schema} v{SCHEMAS[schema]}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return int(v)
    return v


def read_table(path, schema: str | None = None):
    """Read a table back as ``(schema, columns, float array)``.

    Raises
    ------
    SchemaError
        If the schema line is missing, names another table or an unknown
        version.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline().strip()
        parts = first.split()
        if len(parts) != 4 or parts[:2] != ["#", "schema:"] or not parts[3].startswith("v"):
            raise SchemaError(f"{path}: missing schema line")
        name, version = parts[2], parts[3][1:]
        if name not in SCHEMAS:
            raise SchemaError(f"{path}: unknown schema {name!r}")
        if schema is not None and name != schema:
            raise SchemaError(f"{path}: expected schema {schema!r}, found {name!r}")
        if version != str(SCHEMAS[name]):
            raise SchemaError(f"{path}: unsupported {name} version {version!r}")
        reader = csv.reader(fh)
        columns = next(reader)
        data = np.array([[float(x) for x in row] for row in reader if row], dtype=float)
    return name, columns, data.reshape(-1, len(columns))


# --- figures -------------------------------------------------------------

def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_rve_steps(path, stretch, sigma, p2) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for k, lab in enumerate(("11", "22", "33")):
        a1.plot(stretch, sigma[:, k], marker="o", label=rf"$\sigma_{{{lab}}}$")
    a1.set_xlabel("stretch")
    a1.set_ylabel("Cauchy stress")
    a1.legend()
    a2.plot(stretch, p2, marker="s", color="k")
    a2.set_xlabel("stretch")
    a2.set_ylabel(r"$P_2$")
    return _save(fig, path)


def plot_stress_strain(path, strain, stress) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.plot(strain, stress, marker="o")
    ax.set_xlabel("nominal strain")
    ax.set_ylabel("nominal stress")
    return _save(fig, path)


def plot_tangent(path, stress, tangent) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ok = (stress > 0) & (tangent > 0)
    ax.loglog(stress[ok], tangent[ok], marker="o")
    ax.set_xlabel("nominal stress")
    ax.set_ylabel("tangent stiffness")
    return _save(fig, path)


def plot_p2(path, initial, final) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    bins = np.linspace(-0.5, 1.0, 31)
    ax.hist(initial, bins=bins, alpha=0.6, label="initial")
    ax.hist(final, bins=bins, alpha=0.6, label="final")
    ax.set_xlabel(r"$P_2$")
    ax.set_ylabel("elements")
    ax.legend()
    return _save(fig, path)


def plot_bench(path, rows) -> Path:
    """``rows`` are (batch_size, workers, self_speedup, speedup) tuples."""
    rows = np.asarray(rows, dtype=float)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for w in np.unique(rows[:, 1]):
        r = rows[rows[:, 1] == w]
        a1.semilogx(r[:, 0], r[:, 2], marker="o", label=f"{int(w)} workers")
    a1.set_xlabel("batch size")
    a1.set_ylabel("self speedup")
    a1.legend()
    big = rows[rows[:, 0] == rows[:, 0].max()]
    a2.plot(big[:, 1], big[:, 3], marker="o")
    a2.set_xlabel("workers")
    a2.set_ylabel(f"speedup (batch {int(rows[:, 0].max())})")
    return _save(fig, path)


def plot_network(path, net) -> Path:
    fig = plt.figure(figsize=(4.8, 4.8))
    ax = fig.add_subplot(projection="3d")
    X = net.node_coords
    for i, j in net.fibers:
        ax.plot(*X[[i, j]].T, color="0.3", lw=0.6)
    b = net.is_boundary
    ax.scatter(*X[b].T, s=6, color="tab:red")
    ax.scatter(*X[~b].T, s=6, color="tab:blue")
    return _save(fig, path)


def plot_orientation(path, cos_theta, weights) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.hist(np.abs(cos_theta), bins=20, range=(0, 1), weights=weights, density=True)
    ax.set_xlabel(r"$|\cos\theta|$")
    ax.set_ylabel("length-weighted density")
    return _save(fig, path)
