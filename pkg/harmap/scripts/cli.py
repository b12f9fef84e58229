from functools import wraps
import json as _json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
import typer

from harmap import __version__, config
from harmap.constants import (
    EXIT_CONVERGENCE_ERROR,
    EXIT_INPUT_ERROR,
    EXIT_NUMERICAL_ERROR,
    SOLUTION_VERSION,
    Linearisation,
    MonitorKind,
    OrthVariant,
    ReparamMode,
    Scheme,
    TargetDomain,
)
from harmap.errors import ConvergenceError, HarmapError, InputError, NumericalError
from harmap.io import (
    Solution,
    export_grid,
    export_svg,
    geometry_document,
    geometry_from_document,
    load_geometry_document,
    parse_recipe,
    parse_solution,
    plain,
    write_geometry,
    write_solution,
)
from harmap.metrics import (
    bijectivity_report,
    convergence_rate,
    h1_distance,
    quality_report,
    ratio_report,
    refinement_rate,
    vertex_limits,
)
from harmap.parameterise import (
    ReparamOptions,
    parameterise,
    reference_controlmap,
    reference_geometry,
    reparameterise,
)
from harmap.samples import SAMPLES, sample
from harmap.solvers import SolverConfig
from harmap.topology import MultipatchSpace

logger = logging.getLogger(__name__)
logger.setLevel(config.LOG_LEVEL)

app = typer.Typer()


def _make_bold(s, **kwargs):
    return typer.style(s, bold=True, **kwargs)


def _sidecar(out: str, kind: str) -> str:
    return f"{os.path.splitext(out)[0]}.{kind}.json"


def _write(path: str, text: str):
    with open(path, "w") as f:
        f.write(text)
    logger.info(f"Wrote {path}")


def _fail(message: str, code: int):
    typer.echo(f"{_make_bold('Error:', fg=typer.colors.RED)} {message}", err=True)
    raise typer.Exit(code)


def handle_errors(f):
    """Map library errors onto exit codes, leaving a trace file next to ``--out`` on convergence failures"""
    @wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except InputError as e:
            _fail(e.message, EXIT_INPUT_ERROR)
        except ConvergenceError as e:
            out = kwargs.get("out")
            if out:
                trace = _sidecar(out, "trace")
                _write(trace, _json.dumps(plain({"message": e.message, "trace": e.trace}), indent=1) + "\n")
                typer.echo(f"Partial trace written to {trace}", err=True)
            _fail(e.message, EXIT_CONVERGENCE_ERROR)
        except NumericalError as e:
            _fail(e.message, EXIT_NUMERICAL_ERROR)
        except HarmapError as e:
            _fail(e.message, EXIT_NUMERICAL_ERROR)
        except OSError as e:
            _fail(str(e), EXIT_INPUT_ERROR)

    return wrapper


def _read(path: str) -> str:
    with open(path) as f:
        return f.read()


def _load_geometry(geometry: str, correspondence: Optional[str] = None):
    """Geometry file or the name of a built-in sample"""
    if os.path.isfile(geometry):
        doc = load_geometry_document(_read(geometry))
    elif geometry in SAMPLES:
        q, F = sample(geometry)
        doc = geometry_document(q, {"default": F}, name=geometry)
    else:
        raise InputError(f"'{geometry}' is neither a geometry file nor one of the samples {sorted(SAMPLES)}")
    q, F, metadata = geometry_from_document(doc, correspondence)
    return q, F, metadata, doc


def _is_solution(path: str) -> bool:
    if not os.path.isfile(path):
        return False
    try:
        return _json.loads(_read(path)).get("version") == SOLUTION_VERSION
    except (ValueError, AttributeError):
        return False


def _solver_config(
    scheme: Scheme,
    linearisation: Optional[Linearisation],
    mu: Optional[float],
    eps: Optional[float],
    eps_continuation: bool,
    eta: Optional[float],
    quad_order: Optional[int],
) -> SolverConfig:
    if linearisation is None:
        linearisation = Linearisation.fixed_point if Scheme(scheme) == Scheme.rotfree else Linearisation.newton
    kwargs: Dict[str, Any] = {
        "scheme": scheme,
        "linearisation": linearisation,
        "eps_continuation": eps_continuation,
        "quad_order": quad_order,
    }
    if mu is not None:
        kwargs["mu_newton" if Linearisation(linearisation) == Linearisation.newton else "mu_fp"] = mu
    if eps is not None:
        kwargs["eps_weak"] = eps
    if eta is not None:
        kwargs["eta_rot" if Scheme(scheme) == Scheme.rotfree else "eta_dg"] = eta
    return SolverConfig(**kwargs)


def _runtime(threads: Optional[int], seed: Optional[int]):
    if threads is not None:
        if threads < 1:
            raise InputError(f"--threads must be at least 1, got {threads}")
        config.THREADS = threads
    if seed is not None:
        np.random.seed(seed)


def _provenance(command: str, source: str, cfg: Optional[SolverConfig] = None, **options) -> Dict[str, Any]:
    return plain({
        "harmap": __version__,
        "command": command,
        "input": source,
        "config": cfg.as_dict() if cfg is not None else None,
        "threads": config.THREADS,
        **options,
    })


def _write_outputs(solution: Solution, out: Optional[str], svg: Optional[str]):
    if out:
        _write(out, write_solution(solution))
        _write(_sidecar(out, "provenance"), _json.dumps(solution.provenance, indent=1) + "\n")
    if svg:
        _write(svg, export_svg(solution.x))


def _report_table(title: str, values: Dict[str, Any], sep: int = 34) -> str:
    rows = "\n".join(f"            {_make_bold(key + ':'):<{sep}} {_format(value)}" for key, value in values.items())
    return f"""
        {_make_bold(title, underline=True)}
{rows}
"""


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _controlmap_for_metrics(space: MultipatchSpace):
    r = reference_controlmap(space)
    return r if r.target == TargetDomain.unit_disc else None


@app.command(
    short_help="Parameterise a geometry.",
    help="Compute an inversely harmonic spline parameterisation of a geometry file or built-in sample.",
    no_args_is_help=True
)
@handle_errors
def solve(
    geometry: str = typer.Argument(..., help="Geometry file or sample name"),
    scheme: Scheme = typer.Option(Scheme.c0dg, show_default=True, help="Discretisation scheme"),
    linearisation: Optional[Linearisation] = typer.Option(
        None, help="Defaults to newton, fixed-point for the rotation-free scheme"
    ),
    degree: int = typer.Option(3, show_default=True, help="Spline degree"),
    refine: int = typer.Option(2, show_default=True, help="Dyadic refinements of each patch"),
    mu: Optional[float] = typer.Option(None, help="Coefficient shift of the selected linearisation"),
    eps: Optional[float] = typer.Option(None, help="Initial det J regularisation of the weak form"),
    eps_continuation: bool = typer.Option(True, show_default=True, help="Reduce eps tenfold down to its minimum"),
    eta: Optional[float] = typer.Option(None, help="Penalty of the C0-DG or rotation-free scheme"),
    quad_order: Optional[int] = typer.Option(None, help="Gauss points per direction and element"),
    dense_order: Optional[int] = typer.Option(None, help="Sampling order of the bijectivity check"),
    correspondence: Optional[str] = typer.Option(None, help="Named boundary correspondence of the geometry file"),
    out: Optional[str] = typer.Option(None, help="Solution file"),
    svg: Optional[str] = typer.Option(None, help="Isoline plot of the solution"),
    threads: Optional[int] = typer.Option(None, help="Assembly threads"),
    seed: Optional[int] = typer.Option(None, help="Seed of the global random state"),
    json: bool = typer.Option(False, show_default=True, help="JSON-formatted response")
):
    _runtime(threads, seed)
    q, F, metadata, doc = _load_geometry(geometry, correspondence)
    cfg = _solver_config(scheme, linearisation, mu, eps, eps_continuation, eta, quad_order)
    space = MultipatchSpace.from_degree(q, degree, refine)
    x = parameterise(space, F, cfg)
    report = {
        "quality": quality_report(x, quad_order=quad_order).as_dict(),
        "bijectivity": bijectivity_report(x, dense_order).as_dict(),
    }
    provenance = _provenance("solve", geometry, cfg, degree=degree, refine=refine, seed=seed)
    solution = Solution(q, F, metadata, x, provenance=provenance, report=report, geometry=doc)
    _write_outputs(solution, out, svg)

    if json:
        return typer.echo(_json.dumps(plain({"geometry": metadata, "dimension": space.dimension, **report}), indent=1))
    typer.echo(
        f"""
        {_make_bold("SOLVE:", underline=True)} {_make_bold(metadata['name'] or geometry)}
            {_make_bold("Scheme:"):<34} {cfg.scheme.value}
            {_make_bold("Patches:"):<34} {q.n_patches}
            {_make_bold("Degree:"):<34} {degree}
            {_make_bold("Dimension:"):<34} {space.dimension}"""
    )
    typer.echo(_report_table("QUALITY", report["quality"]))
    typer.echo(_report_table("BIJECTIVITY", report["bijectivity"]))


def _steps(mode: Optional[List[ReparamMode]], recipe: Optional[str]):
    if mode and recipe:
        raise InputError("Pass either --mode or --recipe, not both")
    if recipe:
        return [(step.mode, step.options) for step in parse_recipe(_read(recipe)).steps]
    if not mode:
        raise InputError("At least one --mode or a --recipe is required")
    return [(m, {}) for m in mode]


def _reparam_options(base: Dict[str, Any], overrides: Dict[str, Any]) -> ReparamOptions:
    try:
        return ReparamOptions(**{**base, **overrides})
    except TypeError as e:
        raise InputError(f"Invalid recipe options {sorted(overrides)}: {e}") from e


@app.command(
    short_help="Reparameterise a solution.",
    help=(
        "Recompute a parameterisation under controlmaps built by the chained reparameterisation modes, "
        "applied left to right.  The input is a solution file, a geometry file or a sample name."
    ),
    no_args_is_help=True
)
@handle_errors
def reparam(
    source: str = typer.Argument(..., help="Solution file, geometry file or sample name"),
    mode: Optional[List[ReparamMode]] = typer.Option(None, help="Reparameterisation mode, repeat to chain"),
    recipe: Optional[str] = typer.Option(None, help="Recipe file listing the modes and their options"),
    k: float = typer.Option(1.0, show_default=True, help="Mechanism exponent"),
    normalised: bool = typer.Option(True, show_default=True, help="Normalised interface removal"),
    kappa: Optional[float] = typer.Option(None, help="Vertex-blend decay, no vertex stabilisation if omitted"),
    monitor: MonitorKind = typer.Option(MonitorKind.ring, show_default=True, help="Adaptation monitor"),
    nu1: float = typer.Option(1.0, show_default=True, help="Monitor weight of the adaptation diffusivity"),
    nu2: float = typer.Option(0.01, show_default=True, help="Identity weight of the adaptation diffusivity"),
    variant: OrthVariant = typer.Option(OrthVariant.t, show_default=True, help="Boundary orthogonality variant"),
    layer_ratio: float = typer.Option(72.0, show_default=True, help="Mean transverse derivative over layer target"),
    orth_iterations: int = typer.Option(3, show_default=True, help="Updates of the orthogonalising controlmap"),
    layer_iterations: int = typer.Option(3, show_default=True, help="Corrected refits of the layer steepness"),
    scheme: Scheme = typer.Option(Scheme.weakform, show_default=True, help="Scheme of a geometry input"),
    linearisation: Optional[Linearisation] = typer.Option(
        None, help="Defaults to newton, fixed-point for the rotation-free scheme"
    ),
    degree: int = typer.Option(3, show_default=True, help="Spline degree of a geometry input"),
    refine: int = typer.Option(2, show_default=True, help="Dyadic refinements of a geometry input"),
    mu: Optional[float] = typer.Option(None, help="Coefficient shift of the selected linearisation"),
    eps: Optional[float] = typer.Option(None, help="Initial det J regularisation of the weak form"),
    eps_continuation: bool = typer.Option(True, show_default=True),
    eta: Optional[float] = typer.Option(None),
    quad_order: Optional[int] = typer.Option(None),
    dense_order: Optional[int] = typer.Option(None),
    correspondence: Optional[str] = typer.Option(None),
    out: Optional[str] = typer.Option(None, help="Solution file"),
    svg: Optional[str] = typer.Option(None, help="Isoline plot of the recomputed map"),
    threads: Optional[int] = typer.Option(None),
    json: bool = typer.Option(False, show_default=True, help="JSON-formatted response")
):
    _runtime(threads, None)
    steps = _steps(mode, recipe)
    cfg = _solver_config(scheme, linearisation, mu, eps, eps_continuation, eta, quad_order)
    if _is_solution(source):
        solution = parse_solution(_read(source))
        q, F, metadata, doc = solution.quadrangulation, solution.correspondence, solution.metadata, solution.geometry
        space, x_ref = solution.space, solution.x
    else:
        q, F, metadata, doc = _load_geometry(source, correspondence)
        space = MultipatchSpace.from_degree(q, degree, refine)
        x_ref = reference_geometry(space, F, reference_controlmap(space), cfg)

    base = {
        "k": k, "normalised": normalised, "kappa": kappa, "monitor": MonitorKind(monitor).value,
        "nu1": nu1, "nu2": nu2, "variant": variant, "layer_ratio": layer_ratio,
        "orth_iterations": orth_iterations, "layer_iterations": layer_iterations,
    }
    x, s, applied = x_ref, None, []
    for step_mode, overrides in steps:
        options = _reparam_options(base, overrides)
        x, s = reparameterise(step_mode, space, F, x_ref=x, cfg=cfg, options=options)
        applied.append({"mode": ReparamMode(step_mode).value, "options": options.as_dict()})

    controlmap = _controlmap_for_metrics(space)
    ratios = ratio_report(x_ref, x, controlmap, quad_order, dense_order)
    report = {
        "quality": quality_report(x, controlmap, quad_order).as_dict(),
        "bijectivity": bijectivity_report(x, dense_order).as_dict(),
        "ratios": ratios.as_dict(),
    }
    provenance = _provenance("reparam", source, cfg, steps=applied)
    solution = Solution(q, F, metadata, x, s=s, r=controlmap, provenance=provenance, report=report, geometry=doc)
    _write_outputs(solution, out, svg)

    if json:
        return typer.echo(_json.dumps(plain({"steps": applied, **report}), indent=1))
    typer.echo(
        f"""
        {_make_bold("REPARAM:", underline=True)} {_make_bold(' -> '.join(step['mode'] for step in applied))}"""
    )
    typer.echo(_report_table("RATIOS", report["ratios"]))
    typer.echo(_report_table("QUALITY", report["quality"]))


@app.command(
    short_help="Report quality metrics.",
    help="Report the quality metrics of a solution, and ratios against a reference solution when one is given.",
    no_args_is_help=True
)
@handle_errors
def metrics(
    solution: str = typer.Argument(..., help="Solution file"),
    reference: Optional[str] = typer.Option(None, help="Reference solution for the improvement ratios"),
    quad_order: Optional[int] = typer.Option(None),
    dense_order: Optional[int] = typer.Option(None),
    out: Optional[str] = typer.Option(None, help="Write the JSON report to this file"),
    json: bool = typer.Option(False, show_default=True, help="JSON-formatted response")
):
    parsed = parse_solution(_read(solution))
    x = parsed.x
    controlmap = parsed.r
    report: Dict[str, Any] = {
        "quality": quality_report(x, controlmap, quad_order).as_dict(),
        "bijectivity": bijectivity_report(x, dense_order).as_dict(),
        "vertex_limits": {str(v): values for v, values in vertex_limits(x, controlmap).items()},
    }
    if reference:
        ref = parse_solution(_read(reference))
        report["ratios"] = ratio_report(ref.x, x, controlmap, quad_order, dense_order).as_dict()
    report = plain(report)
    if out:
        _write(out, _json.dumps(report, indent=1) + "\n")
        provenance = _provenance("metrics", solution, reference=reference, quad_order=quad_order, dense_order=dense_order)
        _write(_sidecar(out, "provenance"), _json.dumps(provenance, indent=1) + "\n")

    if json:
        return typer.echo(_json.dumps(report, indent=1))
    typer.echo(
        f"""
        {_make_bold("METRICS:", underline=True)} {_make_bold(solution)}"""
    )
    typer.echo(_report_table("QUALITY", report["quality"]))
    typer.echo(_report_table("BIJECTIVITY", report["bijectivity"]))
    if "ratios" in report:
        typer.echo(_report_table("RATIOS", report["ratios"]))


def _study_table(rows: List[Dict[str, Any]], kappa: float) -> str:
    table = (
        f"\t{_make_bold('Level', underline=True):<20}{_make_bold('Dimension', underline=True):<24}"
        f"{_make_bold('H1 increment', underline=True):<27}{_make_bold('Rate', underline=True):<19}"
        f"{_make_bold('Min det J', underline=True):<24}"
    )
    for row in rows:
        increment = "-" if row["increment"] is None else f"{row['increment']:.4e}"
        rate = "-" if row["rate"] is None else f"{row['rate']:.3f}"
        table += (
            f"\n\t{row['level']:<8}{row['dimension']:<12}{increment:<15}{rate:<7}{row['detj_min']:<12.4e}"
        )
    return table + f"\n\n\t{_make_bold('Estimated rate:')} {kappa:.4f}\n"


@app.command(
    short_help="Run a refinement study.",
    help=(
        "Solve over dyadically refined spaces, warm starting each level from the prolonged coarser solution, "
        "and estimate the convergence rate from the H1 increments of the last three levels."
    ),
    no_args_is_help=True
)
@handle_errors
def study(
    geometry: str = typer.Argument(..., help="Geometry file or sample name"),
    scheme: Scheme = typer.Option(Scheme.c0dg, show_default=True),
    linearisation: Optional[Linearisation] = typer.Option(
        None, help="Defaults to newton, fixed-point for the rotation-free scheme"
    ),
    degree: int = typer.Option(2, show_default=True),
    refine: int = typer.Option(0, show_default=True, help="Refinements of the coarsest level"),
    levels: int = typer.Option(4, show_default=True, help="Number of refinement levels"),
    mu: Optional[float] = typer.Option(None),
    eps: Optional[float] = typer.Option(None),
    eps_continuation: bool = typer.Option(True, show_default=True),
    eta: Optional[float] = typer.Option(None),
    quad_order: Optional[int] = typer.Option(None),
    correspondence: Optional[str] = typer.Option(None),
    out: Optional[str] = typer.Option(None, help="Prefix of the per-level solution files"),
    threads: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    json: bool = typer.Option(False, show_default=True, help="JSON-formatted response")
):
    _runtime(threads, seed)
    if levels < 3:
        raise InputError(f"A refinement study needs at least three levels, got {levels}")
    q, F, metadata, doc = _load_geometry(geometry, correspondence)
    cfg = _solver_config(scheme, linearisation, mu, eps, eps_continuation, eta, quad_order)
    provenance = _provenance("study", geometry, cfg, degree=degree, refine=refine, levels=levels, seed=seed)

    maps, rows = [], []
    for level in range(levels):
        space = MultipatchSpace.from_degree(q, degree, refine + level)
        initial = maps[-1].prolong(space) if maps else None
        x = parameterise(space, F, cfg, initial=initial)
        increment = h1_distance(maps[-1], x, quad_order) if maps else None
        rate = None
        if len(rows) >= 2 and rows[-1]["increment"] is not None:
            rate = convergence_rate(rows[-1]["increment"], increment)
        rows.append({
            "level": level,
            "dimension": space.dimension,
            "mesh_size": space.mesh_size(),
            "increment": increment,
            "rate": rate,
            "detj_min": quality_report(x, quad_order=quad_order).detj_min,
        })
        maps.append(x)
        logger.info(f"Study level {level}: dimension {space.dimension}, increment {increment}")
        if out:
            level_provenance = {**provenance, "level": level}
            solution = Solution(q, F, metadata, x, provenance=level_provenance, geometry=doc)
            _write(f"{out}.level{level}.json", write_solution(solution))

    kappa = refinement_rate(maps)
    summary = plain({"geometry": metadata, "levels": rows, "kappa": kappa})
    if out:
        _write(_sidecar(out, "provenance"), _json.dumps(provenance, indent=1) + "\n")
        _write(f"{out}.study.json", _json.dumps(summary, indent=1) + "\n")

    if json:
        return typer.echo(_json.dumps(summary, indent=1))
    typer.echo(
        f"""
        {_make_bold("STUDY:", underline=True)} {_make_bold(metadata['name'] or geometry)} ({cfg.scheme.value}, p={degree})
"""
    )
    typer.echo(_study_table(rows, kappa))


@app.command(
    short_help="Plot a solution.",
    help="Write the isolines and patch boundaries of a solution as SVG.",
    no_args_is_help=True
)
@handle_errors
def plot(
    solution: str = typer.Argument(..., help="Solution file"),
    out: str = typer.Option(..., help="SVG file"),
    field: str = typer.Option("x", show_default=True, help="Map to plot: x, s or r"),
    isolines: int = typer.Option(9, show_default=True, help="Interior isolines per patch and direction"),
    samples: int = typer.Option(50, show_default=True, help="Points per isoline"),
):
    parsed = parse_solution(_read(solution))
    m = {"x": parsed.x, "s": parsed.s, "r": parsed.r}.get(field)
    if m is None:
        raise InputError(f"Solution {solution} carries no map '{field}'")
    _write(out, export_svg(m, isolines, samples))
    provenance = _provenance("plot", solution, field=field, isolines=isolines, samples=samples)
    _write(_sidecar(out, "provenance"), _json.dumps(provenance, indent=1) + "\n")


@app.command(
    short_help="Export a sample grid.",
    help="Write the map, its patch coordinates and det J on an n by n grid per patch as whitespace separated text.",
    no_args_is_help=True
)
@handle_errors
def grid(
    solution: str = typer.Argument(..., help="Solution file"),
    n: int = typer.Option(11, show_default=True, help="Grid points per direction and patch"),
    out: Optional[str] = typer.Option(None, help="Text file, printed when omitted"),
):
    text = export_grid(parse_solution(_read(solution)).x, n)
    if not out:
        return typer.echo(text, nl=False)
    _write(out, text)


@app.command(
    short_help="Write a sample geometry.",
    help="Write one of the built-in sample geometries as a geometry file.",
    no_args_is_help=True
)
@handle_errors
def geometry(
    name: str = typer.Argument(..., help=f"One of {', '.join(sorted(SAMPLES))}"),
    out: Optional[str] = typer.Option(None, help="Geometry file, printed when omitted"),
):
    q, F = sample(name)
    text = write_geometry(q, F, name=name)
    if not out:
        return typer.echo(text, nl=False)
    _write(out, text)
