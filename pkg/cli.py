"""
Operator command line: run scenarios, validate and evaluate barrier specs,
exchange them through a shadow registry, and check forward invariance.

Exit codes: 0 ok, 1 validation or domain failure, 2 usage error,
3 I/O or network error.
"""

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import click
from rich.console import Console
from rich.table import Table

import config
from behavior_tree import Blackboard, TickRecord, TreeError, build_tree, render_tree, tick_tree
from cell_sim import (
    ScenarioError,
    build_cell_tree,
    check_invariance,
    initial_state,
    load_safety_config,
    load_scenario,
    publish_cell,
    run_scenario,
    summarize,
    write_summary,
    write_trace,
)
from safety_nodes import BarrierSpec, SafetyNodeError, SpecCatalog, load_spec, validate_spec
from tools.cbf import PLANTS, BarrierError
from tools.expression import ExpressionError
from tools.qp import InfeasibleError
from tools.registry_client import RegistryClient, RegistryUnavailable
from tools.registry_store import ConflictError, RecordKind, RegistryError, ShadowRegistry

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

DOMAIN_ERRORS = (
    ScenarioError,
    TreeError,
    ExpressionError,
    SafetyNodeError,
    BarrierError,
    InfeasibleError,
    RegistryError,
)


@dataclass
class ExitReport:
    code: int
    summary: str
    detail: dict[str, Any] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "summary": self.summary, "errors": self.errors, "detail": self.detail}


def _failure(code: int, e: BaseException) -> ExitReport:
    message = str(e) or type(e).__name__
    detail = e.detail() if isinstance(e, RegistryError) else {}
    return ExitReport(code, f"{type(e).__name__}: {message}", detail=detail, errors=[message])


def reports(func: Callable[..., ExitReport]) -> Callable[..., None]:
    """Map a command's ExitReport (or exception) onto output and the exit code."""

    @functools.wraps(func)
    def wrapper(*args, output_format: str = "text", **kwargs) -> None:
        ctx = click.get_current_context()
        try:
            report = func(*args, **kwargs)
        except (RegistryUnavailable, OSError) as e:
            report = _failure(EXIT_IO, e)
        except DOMAIN_ERRORS as e:
            report = _failure(EXIT_FAILURE, e)
        if report.code != EXIT_OK and not report.errors:
            report.errors.append(report.summary)
        if output_format == "json":
            click.echo(json.dumps(report.to_dict(), sort_keys=True))
        else:
            style = "green" if report.code == EXIT_OK else "red"
            console.print(report.summary, style=style, highlight=False, markup=False)
            for error in report.errors:
                if error != report.summary and error not in report.summary:
                    console.print(f"  - {error}", style="red", highlight=False, markup=False)
        ctx.exit(report.code)

    return click.option(
        "--format",
        "output_format",
        type=click.Choice(["text", "json"]),
        default="text",
        show_default=True,
        help="Output format.",
    )(wrapper)


def _client(ctx: click.Context, registry: Optional[str]) -> RegistryClient:
    obj = ctx.obj or {}
    return RegistryClient(registry, session=obj.get("session"), publisher=obj.get("publisher", ""))


def _catalog(spec_files: tuple[str, ...]) -> SpecCatalog:
    catalog = SpecCatalog.with_builtins()
    for path in spec_files:
        catalog.add(load_spec(Path(path)))
    return catalog


def _resolve_spec(ref: str) -> tuple[Optional[BarrierSpec], bytes]:
    """A spec file path or, when no such file exists, a built-in name[@version]."""
    path = Path(ref)
    if path.exists():
        return None, path.read_bytes()
    catalog = SpecCatalog.with_builtins()
    try:
        spec = catalog.resolve(ref)
    except SafetyNodeError:
        raise FileNotFoundError(f"No such spec file or built-in spec: {ref}") from None
    return spec, spec.to_document()


def _parse_vector(text: str) -> list[float]:
    try:
        return [float(part) for part in text.replace("(", "").replace(")", "").split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"{text!r} is not a comma-separated list of numbers") from None


def _parse_params(text: Optional[str]) -> dict[str, float]:
    params = {}
    for item in filter(None, (part.strip() for part in (text or "").split(","))):
        name, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"{item!r} is not NAME=VALUE")
        try:
            params[name.strip()] = float(value)
        except ValueError:
            raise click.BadParameter(f"{item!r} has a non-numeric value") from None
    return params


def _split_ref(ref: str) -> tuple[str, str]:
    name, sep, version = ref.partition("@")
    if not sep or not name or not version:
        raise click.BadParameter(f"{ref!r} is not NAME@VERSION")
    return name, version


registry_option = click.option(
    "--registry",
    default=lambda: config.REGISTRY_URL,
    show_default="$SAFETY_REGISTRY_URL",
    help="Shadow registry base URL.",
)
kind_option = click.option(
    "--kind",
    type=click.Choice([k.value for k in RecordKind]),
    default=RecordKind.SPECS.value,
    show_default=True,
)


@click.group()
@click.option("--log-level", default=lambda: config.LOG_LEVEL, show_default="$SAFETY_LOG_LEVEL")
@click.pass_context
def cli(ctx: click.Context, log_level: str) -> None:
    """Safe behavior trees with shareable barrier conditions."""
    ctx.ensure_object(dict)
    config.setup_logging(log_level, rich=True)


# --- Scenarios ---


@cli.command()
@click.argument("scenario_path", type=click.Path(path_type=Path))
@click.argument("tree_path", type=click.Path(path_type=Path))
@click.option("--safety", "safety_path", type=click.Path(path_type=Path), help="Safety config overriding the scenario's.")
@click.option("--spec", "spec_files", multiple=True, type=click.Path(), help="Extra BarrierSpec files.")
@click.option("--duration", type=float, help="Override the scenario duration (s).")
@click.option("--rate", type=float, help="Override the tick rate (Hz).")
@click.option("--seed", type=int, help="Override the scenario seed.")
@click.option("--trace", "trace_path", type=click.Path(path_type=Path), default="trace.jsonl", show_default=True)
@click.option("--summary", "summary_path", type=click.Path(path_type=Path), help="Write per-barrier statistics (CSV).")
@click.option("--no-filter", is_flag=True, help="Run actions unfiltered (diagnostic).")
@reports
def run(scenario_path, tree_path, safety_path, spec_files, duration, rate, seed, trace_path, summary_path, no_filter):
    """Run SCENARIO_PATH with the tree in TREE_PATH and write a trace."""
    scenario = load_scenario(scenario_path)
    overrides = {k: v for k, v in (("duration", duration), ("rate", rate), ("seed", seed)) if v is not None}
    if overrides:
        scenario = load_scenario({**scenario.model_dump(), **overrides})
    tree_document = tree_path.read_bytes()
    safety = load_safety_config(safety_path) if safety_path else None
    trace = run_scenario(scenario, tree_document, safety, filter_enabled=not no_filter, catalog=_catalog(spec_files))
    write_trace(trace, trace_path)
    rows = summarize(trace)
    if summary_path:
        write_summary(rows, summary_path)

    table = Table(title=f"{scenario.name}: {len(trace.lines)} ticks")
    for column in ("kind", "label", "min", "mean", "max", "missing"):
        table.add_column(column)
    for row in rows:
        table.add_row(
            row.kind, row.label,
            *("-" if v is None else f"{v:.4f}" for v in (row.minimum, row.mean, row.maximum)),
            str(row.missing),
        )
    console.print(table)
    return ExitReport(
        EXIT_OK,
        f"Wrote {len(trace.lines)} tick records to {trace_path}",
        detail={
            "scenario": scenario.name,
            "ticks": len(trace.lines),
            "trace": str(trace_path),
            "summary": [row.__dict__ for row in rows],
        },
    )


@cli.command("show-tree")
@click.argument("tree_path", type=click.Path(path_type=Path))
@click.option("--scenario", "scenario_path", type=click.Path(path_type=Path), help="Bind to this scenario and tick once.")
@reports
def show_tree(tree_path, scenario_path):
    """Render a tree document, optionally with the statuses of one tick."""
    document = tree_path.read_bytes()
    if scenario_path is None:
        tree = build_tree(document)
    else:
        scenario = load_scenario(scenario_path)
        blackboard = Blackboard()
        publish_cell(blackboard, scenario, initial_state(scenario))
        tree, _ = build_cell_tree(document, scenario, blackboard)
        tick_tree(tree, blackboard, TickRecord(tick=0, time=0.0))
    console.print(render_tree(tree))
    return ExitReport(EXIT_OK, f"{tree.name}: ok", detail={"root": tree.name})


# --- Specs ---


@cli.command()
@click.argument("spec_ref")
@reports
def validate(spec_ref):
    """Validate a BarrierSpec file (or built-in spec name)."""
    _, payload = _resolve_spec(spec_ref)
    errors = validate_spec(payload)
    if errors:
        return ExitReport(EXIT_FAILURE, f"{spec_ref}: {len(errors)} violation(s)", detail={"errors": errors}, errors=errors)
    return ExitReport(EXIT_OK, f"{spec_ref}: ok", detail={"errors": []})


@cli.command("eval")
@click.argument("spec_ref")
@click.option("--x", "x_text", required=True, help="State, e.g. 0,0,3,4")
@click.option("--params", "params_text", help="Parameters, e.g. dmin=1")
@click.option("--use-defaults", is_flag=True, help="Fill unspecified parameters from the schema.")
@reports
def eval_command(spec_ref, x_text, params_text, use_defaults):
    """Evaluate h and grad h of a spec at a state."""
    _, payload = _resolve_spec(spec_ref)
    spec = load_spec(payload)
    x = _parse_vector(x_text)
    if len(x) != spec.state_dim:
        return ExitReport(EXIT_FAILURE, f"x has {len(x)} components, {spec.spec_id} expects {spec.state_dim}")
    params = {**(spec.defaults() if use_defaults else {}), **_parse_params(params_text)}
    h, grad = spec.compiled.value_and_grad(x, params)
    gradient = [float(g) for g in grad]
    return ExitReport(
        EXIT_OK,
        f"h = {h:g}   grad h = ({', '.join(f'{g:g}' for g in gradient)})",
        detail={"spec": spec.spec_id, "x": x, "params": params, "h": h, "grad": gradient},
    )


@cli.command("check-invariance")
@click.argument("spec_ref")
@click.option("--plant", type=click.Choice(sorted(PLANTS)), default="planar_cell", show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--duration", type=click.FloatRange(min=0, min_open=True), default=30.0, show_default=True)
@click.option("--rate", type=click.FloatRange(min=0, min_open=True), default=100.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--vmax", type=click.FloatRange(min=0, min_open=True), default=1.0, show_default=True)
@click.option("--params", "params_text", help="Parameter overrides, e.g. dmin=1")
@click.option("--no-filter", is_flag=True, help="Run the hostile controller unfiltered (diagnostic).")
@reports
def check_invariance_command(spec_ref, plant, trials, duration, rate, seed, vmax, params_text, no_filter):
    """Empirical forward-invariance check of the filtered closed loop."""
    _, payload = _resolve_spec(spec_ref)
    spec = load_spec(payload)
    report = check_invariance(
        spec,
        plant_name=plant,
        trials=trials,
        duration=duration,
        rate=rate,
        seed=seed,
        vmax=vmax,
        params=_parse_params(params_text),
        filter_enabled=not no_filter,
    )
    summary = (
        f"{spec.spec_id} on {report.plant} ({'filtered' if report.filtered else 'unfiltered'}): "
        f"{report.violations}/{trials} trials violated, min h = {report.min_h:.6f}"
    )
    code = EXIT_OK if report.ok else EXIT_FAILURE
    return ExitReport(code, summary, detail=report.to_dict())


# --- Registry ---


@cli.command()
@click.argument("path", type=click.Path(path_type=Path))
@registry_option
@kind_option
@click.option("--name", help="Record name (trees only; specs use the document's).")
@click.option("--version", "version", help="Record version (trees only).")
@click.option("--publisher", default="", help="Advisory publisher identity.")
@click.pass_context
@reports
def publish(ctx, path, registry, kind, name, version, publisher):
    """Validate a document locally and publish it."""
    payload = path.read_bytes()
    if kind == RecordKind.SPECS.value:
        errors = validate_spec(payload)
        if errors:
            return ExitReport(EXIT_FAILURE, f"{path}: {len(errors)} violation(s)", detail={"errors": errors}, errors=errors)
        spec = load_spec(payload)
        name, version = spec.name, spec.version
    else:
        build_tree(payload)
        if not (name and version):
            raise click.UsageError("--name and --version are required for trees")
    client = _client(ctx, registry)
    if publisher:
        client.publisher = publisher
    try:
        record, created = client.publish(RecordKind(kind), name, version, payload)
    except ConflictError as e:
        return ExitReport(
            EXIT_FAILURE,
            f"Conflict: {name}@{version} is stored with digest {e.stored_digest}, local file has {e.offered_digest}",
            detail=e.detail(),
        )
    verb = "Published" if created else "Already published"
    return ExitReport(EXIT_OK, f"{verb} {name}@{version} ({record.content_digest})", detail=record.model_dump(mode="json"))


@cli.command()
@click.argument("ref")
@registry_option
@kind_option
@click.option("-o", "--output", "output", type=click.Path(path_type=Path), required=True)
@click.pass_context
@reports
def fetch(ctx, ref, registry, kind, output):
    """Fetch NAME@VERSION and write the payload verbatim."""
    name, version = _split_ref(ref)
    payload, digest = _client(ctx, registry).fetch(RecordKind(kind), name, version)
    output.write_bytes(payload)
    return ExitReport(EXIT_OK, f"Wrote {name}@{version} to {output} ({digest})", detail={"digest": digest, "size": len(payload)})


@cli.command()
@registry_option
@kind_option
@click.option("--prefix", help="Name prefix.")
@click.option("--tag", help="Required tag.")
@click.pass_context
@reports
def query(ctx, registry, kind, prefix, tag):
    """List published documents."""
    entries = _client(ctx, registry).query(RecordKind(kind), prefix=prefix, tag=tag)
    table = Table(title=f"{kind} in {registry}")
    for column in ("name", "versions", "tags", "digest"):
        table.add_column(column)
    for entry in entries:
        table.add_row(entry.name, ", ".join(entry.versions), ", ".join(entry.tags), entry.digest[:12])
    console.print(table)
    return ExitReport(EXIT_OK, f"{len(entries)} match(es)", detail={"entries": [e.model_dump() for e in entries]})


@cli.command()
@click.option("--root", type=click.Path(path_type=Path), help="Audit a local registry directory instead of a server.")
@registry_option
@click.pass_context
@reports
def audit(ctx, root, registry):
    """Re-verify every stored record."""
    if root is not None:
        if not root.is_dir():
            raise FileNotFoundError(f"No registry directory at {root}")
        result = ShadowRegistry(root).audit().model_dump()
    else:
        result = _client(ctx, registry).audit()
    problems = result.get("problems", [])
    code = EXIT_OK if not problems else EXIT_FAILURE
    summary = f"Audited {result.get('checked', 0)} record(s): {len(problems)} problem(s)"
    return ExitReport(code, summary, detail=result, errors=list(problems))


@cli.command()
@click.option("--host", default=lambda: config.HOST, show_default="$HOST")
@click.option("--port", type=int, default=lambda: config.PORT, show_default="$PORT")
@click.option("--root", default=lambda: config.REGISTRY_ROOT, show_default="$SAFETY_REGISTRY_ROOT")
def serve(host, port, root):
    """Start the shadow registry service."""
    from registry_server import serve as serve_registry

    console.print(f"Shadow registry on http://{host}:{port} (root {root})", style="cyan")
    serve_registry(host=host, port=port, root=root)


if __name__ == "__main__":
    cli()
