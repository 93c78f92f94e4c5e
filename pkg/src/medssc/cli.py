"""Command-line client for the pipeline service.

Each verb maps to one service endpoint. With no ``--server`` the service
app is mounted in-process (one command = one process); with ``--server``
the same requests go to a remote instance over HTTP. Every command exits
non-zero on any error.
"""

from __future__ import annotations

import asyncio
import json

import click
import httpx


class ServiceClient:
    """Minimal JSON client: remote HTTP or in-process ASGI."""

    def __init__(self, server: str | None = None):
        self.server = server
        self._app = None

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        try:
            if self.server:
                with httpx.Client(base_url=self.server, timeout=None) as client:
                    response = client.request(method, path, json=payload)
            else:
                response = asyncio.run(self._local(method, path, payload))
        except httpx.HTTPError as exc:
            raise click.ClickException(f"cannot reach service: {exc}") from exc
        if response.status_code >= 400:
            raise click.ClickException(_error_detail(response))
        return response.json()

    async def _local(self, method: str, path: str, payload: dict | None) -> httpx.Response:
        if self._app is None:
            from .service.app import create_app

            self._app = create_app()
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://medssc.internal", timeout=None
        ) as client:
            return await client.request(method, path, json=payload)


def _error_detail(response: httpx.Response) -> str:
    try:
        detail = response.json().get("detail")
    except ValueError:
        detail = response.text
    if isinstance(detail, list):  # pydantic validation errors
        detail = "; ".join(
            f"{'.'.join(str(p) for p in item.get('loc', []))}: {item.get('msg')}"
            for item in detail
        )
    return f"[{response.status_code}] {detail}"


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.ClickException(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        overrides[key.strip()] = value
    return overrides


def common_options(fn):
    options = [
        click.option("--dataset", type=click.Choice(["pubmed20k", "pubmed200k", "nicta"]),
                     default="pubmed20k", show_default=True, help="Dataset preset."),
        click.option("--work-dir", required=True, type=click.Path(),
                     help="Pipeline work directory (server-local path)."),
        click.option("--config", "config_file", type=click.Path(),
                     help="YAML/JSON config file layered over the dataset preset."),
        click.option("--seed", type=int, default=None, help="Random seed override."),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Dotted config override, e.g. --set sen.epochs=2"),
        click.option("--server", default=None, envvar="MEDSSC_SERVER",
                     help="Remote service URL; default runs the service in-process."),
        click.option("--force", is_flag=True, help="Proceed past config-hash mismatches."),
        click.option("--json", "as_json", is_flag=True, help="Print the raw JSON response."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _payload(dataset, work_dir, config_file, seed, overrides, force, **extra) -> dict:
    payload = {
        "dataset": dataset,
        "work_dir": work_dir,
        "config_file": config_file,
        "seed": seed,
        "overrides": _parse_overrides(overrides),
        "force": force,
    }
    payload.update({k: v for k, v in extra.items() if v is not None})
    return payload


def _emit(response: dict, as_json: bool, lines) -> None:
    if as_json:
        click.echo(json.dumps(response, indent=2, sort_keys=True))
        return
    for line in lines:
        click.echo(line)
    for warning in response.get("warnings") or []:
        click.echo(warning, err=True)


def _history_lines(response: dict):
    yield f"checkpoint: {response['checkpoint']}"
    for row in response["history"]:
        yield (
            f"epoch {row['epoch']:>3}  train_loss {row['train_loss']:.4f}  "
            f"val_loss {row['val_loss']:.4f}  val_f1 {row['val_f1']:.4f}  "
            f"lr {row['learning_rate']:.2e}"
        )
    yield (
        f"best epoch {response['best_epoch']} "
        f"(val_loss {response['best_val_loss']:.4f}, val_f1 {response['best_val_f1']:.4f})"
    )


@click.group()
@click.version_option(package_name="medssc")
def main():
    """Sequential sentence classification pipeline for medical abstracts."""


@main.command()
@common_options
@click.option("--data-dir", required=True, type=click.Path(),
              help="Directory with the dataset release files.")
@click.option("--word-vectors", type=click.Path(),
              help="Pretrained word-vector text file (token v1 ... vN per line).")
def prepare(dataset, work_dir, config_file, seed, overrides, server, force, as_json,
            data_dir, word_vectors):
    """Parse the dataset, build vocabularies and feature tables."""
    response = ServiceClient(server).request(
        "POST", "/prepare",
        _payload(dataset, work_dir, config_file, seed, overrides, force,
                 data_dir=data_dir, word_vectors=word_vectors),
    )
    lines = [f"prepared {response['work_dir']} (config {response['config_hash']})"]
    for split, counts in response["splits"].items():
        lines.append(f"  {split}: {counts['abstracts']} abstracts, {counts['sentences']} sentences")
    lines.append(
        f"  vocab: {response['word_vocab_size']} words, {response['char_vocab_size']} chars"
    )
    _emit(response, as_json, lines)


@main.command("export-sentence-vectors")
@common_options
@click.option("--encoder", default=None,
              help="Encoder spec: 'hash' (offline, deterministic) or 'hf:<model-or-path>'.")
def export_sentence_vectors(dataset, work_dir, config_file, seed, overrides, server,
                            force, as_json, encoder):
    """Encode every sentence once and cache the frozen vectors."""
    response = ServiceClient(server).request(
        "POST", "/export-sentence-vectors",
        _payload(dataset, work_dir, config_file, seed, overrides, force, encoder=encoder),
    )
    _emit(response, as_json, [
        f"cached {response['sentences']} sentence vectors "
        f"(dim {response['dim']}, encoder {response['encoder_id']}) at {response['cache']}"
    ])


@main.command("train-sen")
@common_options
@click.option("--epochs", type=int, default=None, help="Override training epochs.")
@click.option("--branches", default=None,
              help="Comma-separated subset of word,char,stat,pretrained.")
def train_sen(dataset, work_dir, config_file, seed, overrides, server, force, as_json,
              epochs, branches):
    """Train the sentence-level classifier."""
    branch_list = branches.split(",") if branches else None
    response = ServiceClient(server).request(
        "POST", "/train/sen",
        _payload(dataset, work_dir, config_file, seed, overrides, force,
                 epochs=epochs, branches=branch_list),
    )
    _emit(response, as_json, _history_lines(response))


@main.command("extract-embeddings")
@common_options
def extract_embeddings(dataset, work_dir, config_file, seed, overrides, server, force, as_json):
    """Extract per-sentence embeddings from the trained sentence model."""
    response = ServiceClient(server).request(
        "POST", "/extract-embeddings",
        _payload(dataset, work_dir, config_file, seed, overrides, force),
    )
    lines = [
        f"{split}: {count} sentence embeddings (dim {response['dim']}) -> {response['files'][split]}"
        for split, count in response["sentences"].items()
    ]
    _emit(response, as_json, lines)


@main.command("train-abs")
@common_options
@click.option("--epochs", type=int, default=None, help="Override training epochs.")
def train_abs(dataset, work_dir, config_file, seed, overrides, server, force, as_json, epochs):
    """Train the abstract-level model."""
    response = ServiceClient(server).request(
        "POST", "/train/abs",
        _payload(dataset, work_dir, config_file, seed, overrides, force, epochs=epochs),
    )
    _emit(response, as_json, _history_lines(response))


@main.command("train-seg")
@common_options
@click.option("--epochs", type=int, default=None, help="Override training epochs.")
def train_seg(dataset, work_dir, config_file, seed, overrides, server, force, as_json, epochs):
    """Train the segment-level model."""
    response = ServiceClient(server).request(
        "POST", "/train/seg",
        _payload(dataset, work_dir, config_file, seed, overrides, force, epochs=epochs),
    )
    _emit(response, as_json, _history_lines(response))


@main.command()
@common_options
@click.option("--level", type=click.Choice(["sen", "abs", "seg", "combine"]),
              default="combine", show_default=True)
@click.option("--split", default="test", show_default=True)
def evaluate(dataset, work_dir, config_file, seed, overrides, server, force, as_json,
             level, split):
    """Score a pipeline level against gold labels and write reports."""
    response = ServiceClient(server).request(
        "POST", "/evaluate",
        _payload(dataset, work_dir, config_file, seed, overrides, force,
                 level=level, split=split),
    )
    lines = [
        f"{level} on {split}:",
        response["report_text"],
        f"report: {response['report_files']['json']}",
    ]
    _emit(response, as_json, lines)


@main.command()
@common_options
@click.option("--level", type=click.Choice(["sen", "abs", "seg", "combine"]),
              default="combine", show_default=True)
@click.option("--split", default="test", show_default=True)
def predict(dataset, work_dir, config_file, seed, overrides, server, force, as_json,
            level, split):
    """Write per-sentence scores and decoded labels for a level."""
    response = ServiceClient(server).request(
        "POST", "/predict",
        _payload(dataset, work_dir, config_file, seed, overrides, force,
                 level=level, split=split),
    )
    _emit(response, as_json, [
        f"wrote {response['sentences']} sentence scores for "
        f"{response['abstracts']} abstracts to {response['prediction_file']}"
    ])


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the pipeline service."""
    import uvicorn

    uvicorn.run("medssc.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
