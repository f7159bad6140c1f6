"""Command-line pipeline: phantom -> render -> reconstruct -> density -> eval / physics.

Exit codes: 0 ok, 2 input validation, 3 shape/consistency mismatch,
4 reconstruction did not converge (result still written), 5 degenerate problem.
"""

from __future__ import annotations

import functools
import json
import os
import re
import sys
from pathlib import Path

import click

from . import __version__
from .errors import MaterialLookupError, ShapeError, ValidationError, XDenError

EXIT_NOT_CONVERGED = 4


def configure_threads(threads: int | None) -> int:
    """Bound numba's worker pool; must run before numba is first imported to exceed core count."""
    if threads is None:
        env = os.environ.get("XDEN_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValidationError(f"--threads must be >= 1, got {threads}")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(max(threads, os.cpu_count() or 1))
        # the pool starts below, before raytrace can pick its preferred layer
        os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")
    import numba

    threads = min(threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(threads)
    return threads


def _emit(doc: dict, output: str | None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        click.echo(text, nl=False)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handles_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except XDenError as exc:
            _fail(exc.exit_code, str(exc))
        except (FileNotFoundError, IsADirectoryError) as exc:
            _fail(2, f"{exc.filename}: {exc.strerror}")
    return wrapper


def common(func):
    """``--threads``, ``--version`` and uniform error handling for every subcommand."""
    func = handles_errors(func)
    func = click.option("--threads", type=int, default=None, envvar="XDEN_THREADS",
                        help="Worker threads (default: $XDEN_THREADS or all cores).")(func)
    return click.version_option(__version__, prog_name="xden")(func)


def _read_json(path: str):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: no such file") from exc
    try:
        return text, json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def _line_of(text: str, needle: str) -> int:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return 1


@click.group()
@click.version_option(__version__, prog_name="xden")
def main():
    """Biplanar X-ray density reconstruction toolkit."""


@main.command()
@click.option("--spec", "spec_path", required=True, help="Phantom spec JSON.")
@click.option("-o", "--output", required=True, help="Output volume stem (writes .lvol.json/.raw).")
@click.option("--emit-mu", default=None, help="Also write the ground-truth attenuation vector.")
@common
def phantom(spec_path, output, emit_mu, threads):
    """Rasterize a primitive-part phantom into a label volume."""
    configure_threads(threads)
    from .volume import PhantomSpec, make_phantom, save_volume
    from .xray import save_mu

    text, doc = _read_json(spec_path)
    try:
        vol, mu = make_phantom(PhantomSpec.from_dict(doc))
    except MaterialLookupError as exc:
        name = re.search(r"'([^']*)'", str(exc))
        line = _line_of(text, f'"{name.group(1)}"') if name else 1
        raise ValidationError(f"{spec_path}:{line}: {exc}") from exc
    except ValidationError as exc:
        part = re.match(r"part (\d+):", str(exc))
        line = 1
        if part:
            starts = [i for i, ln in enumerate(text.splitlines(), start=1) if '"shape"' in ln]
            line = starts[int(part.group(1))] if int(part.group(1)) < len(starts) else 1
        raise ValidationError(f"{spec_path}:{line}: {exc}") from exc
    save_volume(vol, output)
    if emit_mu:
        save_mu(mu, emit_mu, vol.region_names())
    _emit({"volume": output, "dims": list(vol.dims), "voxel_size_cm": vol.voxel_size,
           "regions": vol.region_names(), "mu_cm_inv": mu.to_dict()["mu_cm_inv"]}, None)


@main.command()
@click.option("--volume", required=True, help="Label volume (.lvol) for the bounding box.")
@click.option("--resolution", type=int, required=True, help="Detector pixels per side.")
@click.option("--pitch", type=float, required=True, help="Pixel pitch (cm).")
@click.option("--kind", type=click.Choice(["cone", "parallel"]), default="cone")
@click.option("--i0", type=float, default=1.0)
@click.option("--source-distance", type=float, default=None, help="Cone source to box center (cm).")
@click.option("-o", "--output", required=True)
@common
def geom(volume, resolution, pitch, kind, i0, source_distance, output, threads):
    """Write an orthogonal biplanar geometry covering a volume."""
    from .geometry import make_orthogonal_biplanar, save_setup
    from .volume import load_volume

    vol = load_volume(volume)
    setup = make_orthogonal_biplanar(vol.bounds, resolution, pitch, kind=kind, i0=i0,
                                     source_distance=source_distance)
    save_setup(setup, output)


def _matrix(volume, geom_path):
    from .geometry import load_setup
    from .raytrace import build_path_matrix
    from .volume import load_volume

    vol = load_volume(volume)
    setup = load_setup(geom_path)
    return vol, build_path_matrix(vol, setup)


@main.command()
@click.option("--volume", required=True)
@click.option("--mu", "mu_path", required=True, help="Attenuation vector JSON.")
@click.option("--geom", "geom_path", required=True, help="Biplanar geometry JSON.")
@click.option("-o", "--output", nargs=2, required=True, help="Two output image stems (.xri).")
@click.option("--noise-photons", type=float, default=None,
              help="Expected photons per unit intensity for Poisson noise.")
@click.option("--seed", type=int, default=0)
@common
def render(volume, mu_path, geom_path, output, noise_photons, seed, threads):
    """Simulate both detector images of a labeled volume."""
    configure_threads(threads)
    from .xray import add_poisson_noise, load_mu, render as render_views, save_image

    if noise_photons is not None and not noise_photons > 0:
        raise ValidationError(f"--noise-photons must be positive, got {noise_photons:g}")
    mu = load_mu(mu_path)
    vol, matrix = _matrix(volume, geom_path)
    for view in (0, 1):
        if not matrix.lengths[view].any():
            raise ShapeError(f"view {view} does not see the volume at all")
    images = render_views(matrix, mu)
    if noise_photons is not None:
        images = tuple(add_poisson_noise(img, noise_photons, seed + view)
                       for view, img in enumerate(images))
    for img, out in zip(images, output):
        save_image(img, out)
    _emit({"views": list(output), "provenance": matrix.provenance}, None)


@main.command()
@click.option("--volume", required=True)
@click.option("--views", nargs=2, required=True, help="Measured images of view 0 and view 1.")
@click.option("--geom", "geom_path", required=True)
@click.option("--config", "config_path", default=None, help="ReconConfig JSON.")
@click.option("-o", "--output", required=True, help="Result JSON path.")
@common
def reconstruct(volume, views, geom_path, config_path, output, threads):
    """Fit one LAC per region to two measured views."""
    configure_threads(threads)
    from .recon import ReconConfig, reconstruct as run
    from .xray import load_image

    config = ReconConfig()
    if config_path:
        config = ReconConfig.from_dict(_read_json(config_path)[1])
    images = [load_image(v) for v in views]
    vol, matrix = _matrix(volume, geom_path)
    for view, (img, geom_) in enumerate(zip(images, matrix.setup.views)):
        if (img.width, img.height) != (geom_.width, geom_.height):
            raise ShapeError(f"view {view} image is {img.width}x{img.height} but the geometry "
                             f"detector is {geom_.width}x{geom_.height}")
        if img.pixel_pitch != geom_.pixel_pitch or img.i0 != geom_.i0:
            raise ShapeError(f"view {view} image pitch/i0 ({img.pixel_pitch}, {img.i0}) does not "
                             f"match the geometry ({geom_.pixel_pitch}, {geom_.i0})")
    result = run(matrix, images, config)
    Path(output).write_text(result.to_json())
    for note in result.advisories:
        click.echo(f"warning: {note}", err=True)
    if not result.converged:
        _fail(EXIT_NOT_CONVERGED,
              f"no convergence after {result.iterations} iterations; result written to {output}")


@main.command()
@click.option("--volume", required=True)
@click.option("--result", "result_path", required=True, help="Reconstruction result JSON.")
@click.option("--mac-mode", type=click.Choice(["universal", "per_material"]), default="universal")
@click.option("-o", "--output", required=True, help="Density volume stem (.dvol).")
@common
def density(volume, result_path, mac_mode, output, threads):
    """Turn a reconstruction result into a voxel density field."""
    from .recon import build_density_field, load_result, region_densities, save_density
    from .volume import load_volume

    vol = load_volume(volume)
    result = load_result(result_path)
    field_ = build_density_field(vol, result, mac_mode)
    save_density(field_, output)
    rho = [None if v != v else float(v) for v in region_densities(result, mac_mode)]
    _emit({"density": output, "mac_mode": mac_mode, "rho_g_cm3": rho,
           "advisories": result.advisories}, None)


@main.command("eval")
@click.option("--pred", required=True, help="Predicted density volume (.dvol).")
@click.option("--ref", required=True, help="Reference density volume (.dvol).")
@click.option("--volume", default=None, help="Label volume; restricts MAPE to non-air voxels.")
@click.option("--views", nargs=2, default=None, help="Rendered images to compare.")
@click.option("--ref-views", nargs=2, default=None, help="Measured images to compare against.")
@click.option("-o", "--output", default=None)
@common
def eval_(pred, ref, volume, views, ref_views, output, threads):
    """MAPE of a density field and optional projection RMSE per view."""
    from .metrics import mape_report, projection_rmse
    from .recon import load_density
    from .volume import load_volume
    from .xray import load_image

    labels = load_volume(volume) if volume else None
    report = mape_report(load_density(pred), load_density(ref), labels=labels).to_dict()
    rmse = None
    if views or ref_views:
        if not (views and ref_views):
            raise ValidationError("--views and --ref-views must be given together")
        rmse = [projection_rmse(load_image(a), load_image(b)) for a, b in zip(views, ref_views)]
    report["projection_rmse_per_view"] = rmse
    _emit(report, output)


def _props(density_path, massprops_path, exclude_nan):
    from .physics import MassProperties, mass_properties
    from .recon import load_density

    if bool(density_path) == bool(massprops_path):
        raise ValidationError("give exactly one of --density or --massprops")
    if density_path:
        return mass_properties(load_density(density_path), exclude_nan=exclude_nan)
    return MassProperties.from_dict(_read_json(massprops_path)[1])


@main.command()
@click.option("--density", "density_path", required=True)
@click.option("--exclude-nan", is_flag=True, help="Skip voxels of unidentified regions.")
@click.option("-o", "--output", default=None)
@common
def massprops(density_path, exclude_nan, output, threads):
    """Mass, center of mass and inertia tensor of a density field."""
    _emit(_props(density_path, None, exclude_nan).to_dict(), output)


@main.command()
@click.option("--scenario", type=click.Choice(["pick", "place", "push"]), required=True)
@click.option("--density", "density_path", default=None)
@click.option("--massprops", "massprops_path", default=None, help="Mass properties JSON.")
@click.option("--exclude-nan", is_flag=True)
@click.option("--grasp-point", nargs=3, type=float, default=None)
@click.option("--grasp-axis", nargs=3, type=float, default=None)
@click.option("--max-friction-torque", type=float, default=None, help="N*cm")
@click.option("--support", nargs=2, type=float, multiple=True, help="Ground contact point (cm).")
@click.option("--tilt-deg", type=float, default=0.0)
@click.option("--tilt-axis", nargs=3, type=float, default=(0.0, 1.0, 0.0))
@click.option("--tilt-pivot", nargs=3, type=float, default=(0.0, 0.0, 0.0))
@click.option("--push-point", nargs=3, type=float, default=None)
@click.option("--force", type=float, default=None, help="Horizontal push force (N).")
@click.option("--pivot-edge", nargs=4, type=float, default=None, help="x1 y1 x2 y2 (cm).")
@click.option("--friction", type=float, default=None)
@click.option("--ground-z", type=float, default=0.0)
@click.option("--tolerance", type=float, default=1e-6, help="Marginal band half-width.")
@click.option("-o", "--output", default=None)
@common
def stability(scenario, density_path, massprops_path, exclude_nan, grasp_point, grasp_axis,
              max_friction_torque, support, tilt_deg, tilt_axis, tilt_pivot, push_point, force,
              pivot_edge, friction, ground_z, tolerance, output, threads):
    """Quasi-static pick / place / push stability verdicts."""
    from .physics import (SupportPolygon, Tilt, grasp_stability, push_moment_check,
                          tip_over_check)

    def need(**opts):
        missing = [k.replace("_", "-") for k, v in opts.items() if v in (None, ())]
        if missing:
            raise ValidationError(f"scenario {scenario!r} needs --{', --'.join(missing)}")

    props = _props(density_path, massprops_path, exclude_nan)
    if scenario == "pick":
        need(grasp_point=grasp_point, grasp_axis=grasp_axis,
             max_friction_torque=max_friction_torque)
        report = grasp_stability(props, grasp_point, grasp_axis, max_friction_torque, tolerance)
    elif scenario == "place":
        need(support=support)
        report = tip_over_check(props, SupportPolygon(tuple(support)),
                                Tilt(tilt_deg, tilt_axis, tilt_pivot), tolerance)
    else:
        need(push_point=push_point, force=force, pivot_edge=pivot_edge, friction=friction)
        edge = (pivot_edge[:2], pivot_edge[2:])
        report = push_moment_check(props, push_point, force, edge, friction, ground_z, tolerance)
    _emit(report.to_dict(), output)


if __name__ == "__main__":
    main()
