"""Command-line pipeline driver.

A thin HTTP client over the service: by default requests are carried over an
in-process ASGI transport (no server to start, fully composable in shell
pipelines); pass --url to target a running `amalgam serve` instance instead.
"""

import asyncio
import json

import click
import httpx

from .service import app


class ServiceClient:
    def __init__(self, url: str | None):
        self.url = url

    def _post_in_process(self, path: str, payload: dict) -> httpx.Response:
        # ASGITransport is async-only, so the in-process request runs on a
        # private event loop; behaviorally it is identical to a network call.
        async def call():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://amalgam.local", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        return asyncio.run(call())

    def post(self, path: str, payload: dict) -> object:
        payload = {k: v for k, v in payload.items() if v is not None}
        if self.url is None:
            response = self._post_in_process(path, payload)
        else:
            with httpx.Client(base_url=self.url, timeout=None) as client:
                response = client.post(path, json=payload)
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except (ValueError, AttributeError):
                detail = response.text
            raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
        return response.json()


def _echo_stage(result: dict) -> None:
    click.echo(f"[{result['stage']}] {result['out_dir']}")
    for path, digest in sorted(result["artifacts"].items()):
        click.echo(f"  {path}  sha256:{digest[:12]}")


def _common_payload(ctx, out, config, seed, tasks=None, teacher=None) -> dict:
    return {
        "run_dir": out,
        "config_path": config,
        "seed": seed,
        "tasks": tasks,
        "teacher": teacher,
    }


@click.group()
@click.option("--url", default=None, metavar="URL", help="Remote service URL (default: in-process).")
@click.pass_context
def main(ctx, url):
    """Train a customized multi-task student from pretrained teachers on
    unlabeled data, then branch, regroup, fine-tune and evaluate it."""
    ctx.obj = ServiceClient(url)


config_option = click.option("--config", type=click.Path(), default=None, help="Pipeline config JSON.")
seed_option = click.option("--seed", type=int, default=None, help="Override the top-level seed.")
out_option = click.option("--out", required=True, type=click.Path(), help="Run directory.")
tasks_option = click.option(
    "--tasks", default=None, metavar="N:I,N:J", help='Task selection override, e.g. "0:2,1:5".'
)


@main.command("gen-data")
@config_option
@seed_option
@out_option
@click.pass_context
def gen_data(ctx, config, seed, out):
    """Generate the synthetic multi-label dataset."""
    _echo_stage(ctx.obj.post("/data/generate", _common_payload(ctx, out, config, seed)))


@main.command()
@config_option
@seed_option
@out_option
@click.option("--teacher", required=True, type=int, help="Teacher index to pretrain.")
@click.pass_context
def pretrain(ctx, config, seed, out, teacher):
    """Pretrain one teacher on its label group."""
    _echo_stage(
        ctx.obj.post("/teachers/pretrain", _common_payload(ctx, out, config, seed, teacher=teacher))
    )


@main.command()
@config_option
@seed_option
@out_option
@tasks_option
@click.pass_context
def amalgamate(ctx, config, seed, out, tasks):
    """Block-wise entangled training of the student on unlabeled data."""
    _echo_stage(ctx.obj.post("/amalgamate", _common_payload(ctx, out, config, seed, tasks=tasks)))


@main.command()
@config_option
@seed_option
@out_option
@tasks_option
@click.pass_context
def branchout(ctx, config, seed, out, tasks):
    """Select branch-out blocks and regroup task-specific networks."""
    _echo_stage(ctx.obj.post("/branchout", _common_payload(ctx, out, config, seed, tasks=tasks)))


@main.command()
@config_option
@seed_option
@out_option
@tasks_option
@click.pass_context
def finetune(ctx, config, seed, out, tasks):
    """Fine-tune the regrouped task nets against teacher soft targets."""
    _echo_stage(ctx.obj.post("/finetune", _common_payload(ctx, out, config, seed, tasks=tasks)))


@main.command("eval")
@config_option
@seed_option
@out_option
@tasks_option
@click.pass_context
def evaluate(ctx, config, seed, out, tasks):
    """Evaluate teachers and the final student side by side."""
    result = ctx.obj.post("/eval", _common_payload(ctx, out, config, seed, tasks=tasks))
    _echo_stage(result)
    summary_path = f"{result['out_dir']}/summary.json"
    try:
        with open(summary_path) as fh:
            click.echo(json.dumps(json.load(fh), indent=2, sort_keys=True))
    except OSError:
        pass  # remote server: summary lives on its filesystem


@main.command("run-all")
@config_option
@seed_option
@out_option
@tasks_option
@click.pass_context
def run_all(ctx, config, seed, out, tasks):
    """Run every stage in order: data, teachers, amalgamate, branch, tune, eval."""
    for result in ctx.obj.post("/run-all", _common_payload(ctx, out, config, seed, tasks=tasks)):
        _echo_stage(result)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the pipeline service as a live HTTP server."""
    import uvicorn

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
