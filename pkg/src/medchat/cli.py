"""Command-line interface: training pipelines, corpus tools, consultation, service.

Option precedence is flags over a JSON config file (--config) over built-in
defaults.  Batch pipeline commands write one run_manifest.json per run with
the resolved options and summary metrics; commands taking --seed are
bit-reproducible in those recorded metrics.  Exit codes: 0 ok, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import InvalidConfigError, MedchatError

# face geometry of the avatar pipelines; the soft mouth shade keeps the
# mouth's latent footprint small enough that conditioning stays in charge
AVATAR_FACE = {"size": 128, "mouth_gain": 20.0, "mouth_width": 0.30, "mouth_shade": None}
AVATAR_PARTIALS = 24


def data_dir() -> Path:
    return Path(os.environ.get("MEDCHAT_DATA_DIR", "medchat_data"))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    options: dict
    seed: int | None
    started: str
    finished: str = ""
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / "run_manifest.json"
        body = asdict(self)
        body["options"] = {k: str(v) if isinstance(v, Path) else v for k, v in body["options"].items()}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, the optional JSON config file, and explicit flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidConfigError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(raw)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _start_manifest(command: str, opts: dict) -> RunManifest:
    return RunManifest(
        command=command, options=dict(opts), seed=opts.get("seed"), started=_utc_now()
    )


def frame_to_png_bytes(frame) -> bytes:
    """Map a [-1, 1] image tensor to an 8-bit PNG."""
    import numpy as np
    from PIL import Image

    arr = ((frame.clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _avatar_face_params(opts: dict):
    from .faces import FaceParams

    return FaceParams(
        size=int(opts["size"]),
        mouth_gain=float(opts["mouth_gain"]),
        mouth_width=float(opts["mouth_width"]),
        mouth_shade=None if opts["mouth_shade"] is None else float(opts["mouth_shade"]),
    )


# -- mel-extract ---------------------------------------------------------------------

MEL_DEFAULTS = {"out": None, "window": 1024, "hop": 128, "mels": 80}


def cmd_mel_extract(args) -> int:
    from .audio import MelConfig, load_wav, mel_spectrogram

    opts = resolve_options(args, MEL_DEFAULTS)
    in_path = Path(args.in_path)
    out = Path(opts["out"]) if opts["out"] else in_path.with_suffix(".mel.json")
    manifest = _start_manifest("mel-extract", opts)

    clip = load_wav(in_path)
    cfg = MelConfig(
        sample_rate=clip.sample_rate,
        window_length=int(opts["window"]),
        hop_length=int(opts["hop"]),
        n_mels=int(opts["mels"]),
    )
    mel = mel_spectrogram(clip, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(
            {
                "config": asdict(cfg),
                "shape": list(mel.bins.shape),
                "data": [round(v, 8) for v in mel.bins.flatten().tolist()],
            }
        )
    )
    manifest.finished = _utc_now()
    manifest.artifacts["mel"] = str(out)
    manifest.metrics = {
        "n_frames": mel.n_frames,
        "duration_s": round(clip.duration, 6),
        "bins_mean": round(float(mel.bins.mean()), 8),
    }
    manifest.write(Path(str(out) + ".manifest.json"))
    print(f"wrote {out} ({mel.bins.shape[0]}x{mel.bins.shape[1]})")
    return 0


# -- guard-check ---------------------------------------------------------------------


def cmd_guard_check(args) -> int:
    from .guard import classify, default_ruleset, load_ruleset

    rules = load_ruleset(args.rules) if args.rules else default_ruleset()
    verdict = classify(args.text, rules)
    print(
        json.dumps(
            {
                "category": verdict.category,
                "rule_id": verdict.rule_id,
                "matched_span": verdict.matched_span,
            }
        )
    )
    return 0


# -- train-codec ---------------------------------------------------------------------

TRAIN_CODEC_DEFAULTS = {
    "synthetic": 512,
    "size": 64,
    "mode": "tanh",
    "kl": 1e-6,
    "epochs": 30,
    "lr": 1e-3,
    "batch_size": 16,
    "seed": 7,
    "noise_sigma": 0.3,
    "base_channels": 8,
    "latent_gain": 1.0,
    "out": None,
}

_MODE_NAMES = {"tanh": "tanh_adanorm", "vae": "vae", "unconstrained": "unconstrained"}


def synthetic_faces(count: int, seed: int, params=None):
    """Render count faces with seeded random mouth energies."""
    import torch

    from .faces import FaceParams, render_synthetic_face

    p = params or FaceParams()
    gen = torch.Generator().manual_seed(seed)
    energies = torch.rand(count, generator=gen)
    return torch.stack([render_synthetic_face(float(e), p, gen) for e in energies])


def cmd_train_codec(args) -> int:
    from .codec import CodecConfig, CodecMode, CodecTrainConfig, LatentCodec, train_codec
    from .faces import FaceParams

    opts = resolve_options(args, TRAIN_CODEC_DEFAULTS)
    out = Path(opts["out"]) if opts["out"] else data_dir() / "codec"
    manifest = _start_manifest("train-codec", opts)

    import torch

    torch.manual_seed(int(opts["seed"]))  # weight init draws from the global stream
    dataset = synthetic_faces(int(opts["synthetic"]), int(opts["seed"]), FaceParams(size=int(opts["size"])))
    codec = LatentCodec(
        CodecConfig(
            mode=CodecMode(_MODE_NAMES[opts["mode"]]),
            base_channels=int(opts["base_channels"]),
            kl_weight=float(opts["kl"]),
            latent_gain=float(opts["latent_gain"]),
        )
    )
    ckpt, curve = train_codec(
        dataset,
        codec,
        CodecTrainConfig(
            epochs=int(opts["epochs"]),
            learning_rate=float(opts["lr"]),
            batch_size=int(opts["batch_size"]),
            seed=int(opts["seed"]),
            noise_sigma_max=float(opts["noise_sigma"]),
        ),
    )
    ckpt.save(out)
    curve.save_csv(out / "loss.csv")
    manifest.finished = _utc_now()
    manifest.artifacts = {"checkpoint": str(out), "loss_csv": str(out / "loss.csv")}
    manifest.metrics = {"first_loss": curve.losses[0], "final_loss": curve.losses[-1]}
    manifest.write(out)
    print(f"codec: loss {curve.losses[0]:.4f} -> {curve.losses[-1]:.4f}, checkpoint at {out}")
    return 0


# -- train-diffusion -----------------------------------------------------------------

TRAIN_DIFFUSION_DEFAULTS = {
    "codec": None,
    "frames": 200,
    "epochs": 200,
    "lr": 3e-4,
    "batch_size": 24,
    "seed": 0,
    "unet_channels": 32,
    "stages": 2,
    "heads": 4,
    "time_dim": 64,
    "context_dim": 64,
    "w_mel": 16,
    "t_total": 600,
    "partials": AVATAR_PARTIALS,
    "smooth_radius": 0,
    "out": None,
    **AVATAR_FACE,
}


def cmd_train_diffusion(args) -> int:
    from .audio import save_wav
    from .codec import codec_from_checkpoint
    from .diffusion import (
        ConditionalUNet,
        DiffusionTrainConfig,
        UNetConfig,
        cosine_schedule,
        train_diffusion,
    )
    from .faces import make_talking_dataset

    opts = resolve_options(args, TRAIN_DIFFUSION_DEFAULTS)
    if not opts["codec"]:
        print("error: --codec checkpoint directory is required", file=sys.stderr)
        return 2
    out = Path(opts["out"]) if opts["out"] else data_dir() / "diffusion"
    manifest = _start_manifest("train-diffusion", opts)

    import torch

    torch.manual_seed(int(opts["seed"]))  # weight init draws from the global stream
    codec = codec_from_checkpoint(opts["codec"])
    ds = make_talking_dataset(
        n_frames=int(opts["frames"]),
        seed=int(opts["seed"]),
        params=_avatar_face_params(opts),
        w_mel=int(opts["w_mel"]),
        n_partials=int(opts["partials"]),
        smooth_radius=int(opts["smooth_radius"]),
    )
    sched = cosine_schedule(T=int(opts["t_total"]))
    unet = ConditionalUNet(
        UNetConfig(
            in_channels=codec.config.latent_channels,
            base_channels=int(opts["unet_channels"]),
            stages=int(opts["stages"]),
            attention_heads=int(opts["heads"]),
            time_dim=int(opts["time_dim"]),
            context_dim=int(opts["context_dim"]),
            w_mel=int(opts["w_mel"]),
            n_mels=ds.mel_config.n_mels,
        )
    )
    ckpt, curve = train_diffusion(
        ds,
        codec,
        sched,
        unet,
        DiffusionTrainConfig(
            epochs=int(opts["epochs"]),
            learning_rate=float(opts["lr"]),
            batch_size=int(opts["batch_size"]),
            seed=int(opts["seed"]),
        ),
    )
    ckpt.save(out)
    curve.save_csv(out / "loss.csv")
    save_wav(out / "train_audio.wav", ds.audio)
    manifest.finished = _utc_now()
    manifest.artifacts = {
        "checkpoint": str(out),
        "loss_csv": str(out / "loss.csv"),
        "train_audio": str(out / "train_audio.wav"),
    }
    manifest.metrics = {"first_mse": curve.losses[0], "final_mse": curve.losses[-1]}
    manifest.write(out)
    print(f"diffusion: mse {curve.losses[0]:.4f} -> {curve.losses[-1]:.4f}, checkpoint at {out}")
    return 0


# -- ablation ------------------------------------------------------------------------

ABLATION_DEFAULTS = {
    "synthetic": 256,
    "size": 64,
    "epochs": 25,
    "lr": 2e-3,
    "batch_size": 16,
    "seed": 7,
    "base_channels": 8,
    "out": None,
}

ABLATION_ROWS = (
    ("tanh", "tanh_adanorm", None),
    ("unconstrained", "unconstrained", None),
    ("vae-strong", "vae", 0.01),
    ("vae-weak", "vae", 1e-6),
)


def run_ablation(images, epochs: int, lr: float, batch_size: int, seed: int, base_channels: int):
    """Train the four codec configurations on one dataset and one budget."""
    import torch

    from .codec import CodecConfig, CodecMode, CodecTrainConfig, LatentCodec, train_codec

    rows = []
    for label, mode, kl in ABLATION_ROWS:
        torch.manual_seed(seed)  # identical init for every contender
        codec = LatentCodec(
            CodecConfig(
                mode=CodecMode(mode),
                base_channels=base_channels,
                kl_weight=0.0 if kl is None else kl,
            )
        )
        _, curve = train_codec(
            images,
            codec,
            CodecTrainConfig(
                epochs=epochs,
                learning_rate=lr,
                batch_size=batch_size,
                seed=seed,
                noise_sigma_max=0.0,
            ),
        )
        codec.eval()
        with torch.no_grad():
            z = codec.encode(images[: min(len(images), 128)]).z
        rows.append(
            {
                "label": label,
                "mode": mode,
                "kl_weight": 0.0 if kl is None else kl,
                "final_loss": curve.losses[-1],
                "final_l1": curve.rows[-1].l1,
                "max_abs_latent": float(z.abs().max()),
            }
        )
    return rows


def ablation_verdict(rows) -> tuple[bool, str]:
    by_label = {r["label"]: r for r in rows}
    strong = by_label["vae-strong"]["final_loss"]
    weak = by_label["vae-weak"]["final_loss"]
    tanh = by_label["tanh"]["final_loss"]
    ok = strong > 1.2 * weak and strong > 1.2 * tanh
    margins = f"{strong / weak - 1:+.0%} vs vae-weak, {strong / tanh - 1:+.0%} vs tanh"
    if ok:
        return True, f"verdict: vae-strong converges worst ({margins})"
    return False, f"verdict: ordering violated ({margins})"


def cmd_ablation(args) -> int:
    import csv

    from .faces import FaceParams

    opts = resolve_options(args, ABLATION_DEFAULTS)
    out = Path(opts["out"]) if opts["out"] else data_dir() / "ablation"
    manifest = _start_manifest("ablation", opts)

    images = synthetic_faces(int(opts["synthetic"]), int(opts["seed"]), FaceParams(size=int(opts["size"])))
    rows = run_ablation(
        images,
        epochs=int(opts["epochs"]),
        lr=float(opts["lr"]),
        batch_size=int(opts["batch_size"]),
        seed=int(opts["seed"]),
        base_channels=int(opts["base_channels"]),
    )
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    ok, verdict = ablation_verdict(rows)
    manifest.finished = _utc_now()
    manifest.artifacts = {"table": str(table)}
    manifest.metrics = {r["label"]: r["final_loss"] for r in rows}
    manifest.metrics["ordering_holds"] = ok
    manifest.write(out)
    for row in rows:
        print(
            f"{row['label']:>13}: loss {row['final_loss']:.4f} "
            f"max|z| {row['max_abs_latent']:.3f}"
        )
    print(verdict)
    return 0


# -- generate ------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "codec": None,
    "unet": None,
    "wav": None,
    "frames": 30,
    "t_start": 100,
    "fps": 30.0,
    "seed": 0,
    "stochastic": True,
    "start_frame": 0,
    "ref_energy": 0.5,
    "out": None,
    **AVATAR_FACE,
}


def cmd_generate(args) -> int:
    from .audio import MelConfig, load_wav, mel_spectrogram
    from .codec import codec_from_checkpoint
    from .diffusion import AvatarModels, GenerationConfig, generate_block, unet_from_checkpoint
    from .faces import render_synthetic_face

    opts = resolve_options(args, GENERATE_DEFAULTS)
    missing = [k for k in ("codec", "unet", "wav") if not opts[k]]
    if missing:
        print(f"error: --{' --'.join(missing)} required", file=sys.stderr)
        return 2
    out = Path(opts["out"]) if opts["out"] else data_dir() / "frames"
    manifest = _start_manifest("generate", opts)

    codec = codec_from_checkpoint(opts["codec"])
    unet, sched = unet_from_checkpoint(opts["unet"])
    clip = load_wav(opts["wav"])
    mel = mel_spectrogram(clip, MelConfig(sample_rate=clip.sample_rate, n_mels=unet.cfg.n_mels))
    ref = render_synthetic_face(float(opts["ref_energy"]), _avatar_face_params(opts))
    gen_cfg = GenerationConfig(
        t_start=int(opts["t_start"]),
        block_size=int(opts["frames"]),
        fps=float(opts["fps"]),
        stochastic=bool(opts["stochastic"]),
        seed=int(opts["seed"]),
    )
    frames = generate_block(
        ref, mel, gen_cfg, AvatarModels(codec=codec, sched=sched, unet=unet),
        start_frame=int(opts["start_frame"]),
    )

    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for i, frame in enumerate(frames):
        png = frame_to_png_bytes(frame)
        digest.update(png)
        (out / f"frame_{i:04d}.png").write_bytes(png)
    block = {
        "fps": gen_cfg.fps,
        "t_start": gen_cfg.t_start,
        "seed": gen_cfg.seed,
        "stochastic": gen_cfg.stochastic,
        "frames": len(frames),
        "start_frame": int(opts["start_frame"]),
        "mel_source": str(opts["wav"]),
    }
    (out / "block.json").write_text(json.dumps(block, indent=2) + "\n")
    manifest.finished = _utc_now()
    manifest.artifacts = {"frames": str(out), "block": str(out / "block.json")}
    manifest.metrics = {"frames": len(frames), "frames_digest": digest.hexdigest()}
    manifest.write(out)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


# -- gen-dialogues -------------------------------------------------------------------

GEN_DIALOGUES_DEFAULTS = {
    "count": 30,
    "seed": 0,
    "min_questions": 10,
    "max_tokens": 1500,
    "out": None,
}


def cmd_gen_dialogues(args) -> int:
    from .dialogue import (
        GuidelineConfig,
        TemplateBackend,
        contains_question,
        load_symptom_table,
        synthesize_dialogue,
        turn_to_dict,
    )

    opts = resolve_options(args, GEN_DIALOGUES_DEFAULTS)
    out = Path(opts["out"]) if opts["out"] else data_dir() / "dialogues"
    manifest = _start_manifest("gen-dialogues", opts)

    table = load_symptom_table()
    out.mkdir(parents=True, exist_ok=True)
    names, total_turns, total_questions = [], 0, 0
    for i in range(int(opts["count"])):
        record = table[i % len(table)]
        cfg = GuidelineConfig(
            min_questions=int(opts["min_questions"]), symptom_lexicon=record.symptoms
        )
        turns = synthesize_dialogue(
            record,
            TemplateBackend(cfg),
            cfg,
            max_tokens=int(opts["max_tokens"]),
            seed=int(opts["seed"]) + i,
        )
        name = f"dialogue_{i:03d}.json"
        (out / name).write_text(
            json.dumps(
                {"disease": record.disease, "turns": [turn_to_dict(t) for t in turns]},
                indent=2,
            )
            + "\n"
        )
        names.append(name)
        total_turns += len(turns)
        total_questions += sum(
            1 for t in turns if t.role == "bot" and contains_question(t.text)[0]
        )
    (out / "index.json").write_text(json.dumps(names, indent=2) + "\n")
    manifest.finished = _utc_now()
    manifest.artifacts = {"directory": str(out), "index": str(out / "index.json")}
    manifest.metrics = {
        "dialogues": len(names),
        "total_turns": total_turns,
        "total_questions": total_questions,
    }
    manifest.write(out)
    print(f"wrote {len(names)} dialogues to {out}")
    return 0


# -- split ---------------------------------------------------------------------------

SPLIT_DEFAULTS = {"ratio": 0.9, "seed": 0, "out": None}


def cmd_split(args) -> int:
    from .dialogue import split_dataset

    opts = resolve_options(args, SPLIT_DEFAULTS)
    if args.inputs:
        source = Path(args.inputs)
        items = sorted(
            p.name
            for p in source.glob("*.json")
            if p.name not in ("index.json", "run_manifest.json")
        )
        out = Path(opts["out"]) if opts["out"] else source
    else:
        items = list(range(int(args.count)))
        out = Path(opts["out"]) if opts["out"] else data_dir() / "split"
    manifest = _start_manifest("split", opts)

    train, val = split_dataset(items, ratio=float(opts["ratio"]), seed=int(opts["seed"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.json").write_text(json.dumps(train, indent=2) + "\n")
    (out / "val.json").write_text(json.dumps(val, indent=2) + "\n")
    manifest.finished = _utc_now()
    manifest.artifacts = {"train": str(out / "train.json"), "val": str(out / "val.json")}
    manifest.metrics = {"n_items": len(items), "n_train": len(train), "n_val": len(val)}
    manifest.write(out / "split_manifest.json")
    print(f"split {len(items)} items into {len(train)}/{len(val)} at {out}")
    return 0


# -- consult -------------------------------------------------------------------------

CONSULT_DEFAULTS = {
    "patient": "walk-in",
    "store": None,
    "script": None,
    "min_questions": 10,
    "backend": "template",
    "base_url": None,
}


def _record_new_turns(store, session_id: str, state, start: int) -> int:
    for turn in state.transcript[start:]:
        verdict = turn.guard_verdict
        store.record_turn(
            session_id,
            turn.index,
            turn.role,
            turn.text,
            guard_category=verdict.category if verdict else None,
            guard_rule_id=verdict.rule_id if verdict else None,
        )
    return len(state.transcript)


def cmd_consult(args) -> int:
    from .dialogue import (
        GuidelineConfig,
        HttpBackend,
        Phase,
        TemplateBackend,
        default_symptom_lexicon,
        new_session,
        step_session,
    )
    from .service import default_guard
    from .store import ConsultStore, parse_summary

    opts = resolve_options(args, CONSULT_DEFAULTS)
    if opts["backend"] == "http" and not opts["base_url"]:
        print("error: --base-url is required with --backend http", file=sys.stderr)
        return 2
    cfg = GuidelineConfig(
        min_questions=int(opts["min_questions"]), symptom_lexicon=default_symptom_lexicon()
    )
    backend = (
        HttpBackend(opts["base_url"]) if opts["backend"] == "http" else TemplateBackend(cfg)
    )
    guard_fn = default_guard()

    if opts["script"]:
        lines = iter(Path(opts["script"]).read_text("utf-8").splitlines())

        def read_line() -> str | None:
            return next(lines, None)

    else:

        def read_line() -> str | None:
            try:
                return input("you: ")
            except EOFError:
                return None

    with ConsultStore(opts["store"] or ":memory:") as store:
        patient_id = store.register_patient(opts["patient"])
        session_id = store.create_session(patient_id)
        context = store.build_context(patient_id)
        state = new_session(context=context)
        recorded = 0

        state, text = step_session(state, None, backend, guard_fn, cfg)
        store.set_session_phase(session_id, state.phase.name)
        recorded = _record_new_turns(store, session_id, state, recorded)
        print(f"bot: {text}")
        while state.phase < Phase.SUMMARIZING:
            line = read_line()
            if line is None:
                print("consultation aborted before completion", file=sys.stderr)
                return 1
            state, text = step_session(state, line, backend, guard_fn, cfg)
            store.set_session_phase(session_id, state.phase.name)
            recorded = _record_new_turns(store, session_id, state, recorded)
            print(f"bot: {text}")
        state, raw = step_session(state, None, backend, guard_fn, cfg)
        doc = parse_summary(raw)
        store.set_session_phase(session_id, "SUMMARIZING")
        store.persist_summary(session_id, doc)
        print()
        print(store.generate_report(session_id))
    return 0


# -- serve ---------------------------------------------------------------------------

SERVE_DEFAULTS = {
    "host": "127.0.0.1",
    "port": 8000,
    "store": None,
    "frontend": None,
    "codec": None,
    "unet": None,
    "wav": None,
    "min_questions": 10,
    "t_start": 100,
    "fps": 30.0,
    "ref_energy": 0.5,
    **AVATAR_FACE,
}


def load_avatar_assets(opts: dict):
    from .audio import MelConfig, load_wav, mel_spectrogram
    from .codec import codec_from_checkpoint
    from .diffusion import AvatarModels, unet_from_checkpoint
    from .faces import render_synthetic_face
    from .service import AvatarAssets

    codec = codec_from_checkpoint(opts["codec"])
    unet, sched = unet_from_checkpoint(opts["unet"])
    clip = load_wav(opts["wav"])
    mel = mel_spectrogram(clip, MelConfig(sample_rate=clip.sample_rate, n_mels=unet.cfg.n_mels))
    return AvatarAssets(
        models=AvatarModels(codec=codec, sched=sched, unet=unet),
        mel=mel,
        ref_image=render_synthetic_face(float(opts["ref_energy"]), _avatar_face_params(opts)),
        t_start=int(opts["t_start"]),
        fps=float(opts["fps"]),
    )


def cmd_serve(args) -> int:
    import uvicorn

    from .dialogue import GuidelineConfig, default_symptom_lexicon
    from .service import create_app
    from .store import ConsultStore

    opts = resolve_options(args, SERVE_DEFAULTS)
    avatar = None
    if opts["codec"] and opts["unet"] and opts["wav"]:
        avatar = load_avatar_assets(opts)
    store = ConsultStore(opts["store"] or ":memory:")
    app = create_app(
        store=store,
        guideline=GuidelineConfig(
            min_questions=int(opts["min_questions"]), symptom_lexicon=default_symptom_lexicon()
        ),
        avatar=avatar,
        frontend_dir=opts["frontend"],
    )
    uvicorn.run(app, host=opts["host"], port=int(opts["port"]), log_level="info")
    return 0


# -- parser --------------------------------------------------------------------------


def _add_config_flag(sp) -> None:
    sp.add_argument("--config", help="JSON file with option overrides")


def _add_face_flags(sp) -> None:
    sp.add_argument("--size", type=int)
    sp.add_argument("--mouth-gain", type=float, dest="mouth_gain")
    sp.add_argument("--mouth-width", type=float, dest="mouth_width")
    sp.add_argument("--mouth-shade", type=float, dest="mouth_shade")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medchat", description="Training pipelines, corpus tools, and the consultation service."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("mel-extract", help="extract a log-mel spectrogram from a WAV file")
    sp.add_argument("--in", dest="in_path", required=True, help="input WAV")
    sp.add_argument("--out")
    sp.add_argument("--window", type=int)
    sp.add_argument("--hop", type=int)
    sp.add_argument("--mels", type=int)
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_mel_extract)

    sp = sub.add_parser("guard-check", help="classify one input string")
    sp.add_argument("--rules", help="rule file (defaults to the shipped rules)")
    sp.add_argument("--text", required=True)
    sp.set_defaults(func=cmd_guard_check)

    sp = sub.add_parser("train-codec", help="train the face autoencoder on synthetic faces")
    sp.add_argument("--synthetic", type=int, help="number of synthetic faces")
    sp.add_argument("--size", type=int)
    sp.add_argument("--mode", choices=sorted(_MODE_NAMES))
    sp.add_argument("--kl", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    sp.add_argument("--base-channels", type=int, dest="base_channels")
    sp.add_argument("--latent-gain", type=float, dest="latent_gain")
    sp.add_argument("--out")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_train_codec)

    sp = sub.add_parser("train-diffusion", help="train the conditional denoiser on talking faces")
    sp.add_argument("--codec", help="codec checkpoint directory")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--unet-channels", type=int, dest="unet_channels")
    sp.add_argument("--stages", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--time-dim", type=int, dest="time_dim")
    sp.add_argument("--context-dim", type=int, dest="context_dim")
    sp.add_argument("--w-mel", type=int, dest="w_mel")
    sp.add_argument("--t-total", type=int, dest="t_total")
    sp.add_argument("--partials", type=int)
    sp.add_argument("--smooth-radius", type=int, dest="smooth_radius")
    sp.add_argument("--out")
    _add_face_flags(sp)
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_train_diffusion)

    sp = sub.add_parser("ablation", help="train all codec configurations and compare")
    sp.add_argument("--synthetic", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--base-channels", type=int, dest="base_channels")
    sp.add_argument("--out")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("generate", help="generate avatar frames from audio")
    sp.add_argument("--codec")
    sp.add_argument("--unet")
    sp.add_argument("--wav")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--t-start", type=int, dest="t_start")
    sp.add_argument("--fps", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument(
        "--deterministic", dest="stochastic", action="store_const", const=False,
        help="disable ancestral sampling noise",
    )
    sp.add_argument("--start-frame", type=int, dest="start_frame")
    sp.add_argument("--ref-energy", type=float, dest="ref_energy")
    sp.add_argument("--out")
    _add_face_flags(sp)
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("gen-dialogues", help="synthesize consultation transcripts")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--min-questions", type=int, dest="min_questions")
    sp.add_argument("--max-tokens", type=int, dest="max_tokens")
    sp.add_argument("--out")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_gen_dialogues)

    sp = sub.add_parser("split", help="deterministic train/validation split")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--inputs", help="directory of dialogue JSON files")
    group.add_argument("--count", type=int, help="split synthetic index items instead")
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("consult", help="run an interactive consultation in the terminal")
    sp.add_argument("--patient")
    sp.add_argument("--store", help="SQLite path (defaults to in-memory)")
    sp.add_argument("--script", help="file with one patient line per turn")
    sp.add_argument("--min-questions", type=int, dest="min_questions")
    sp.add_argument("--backend", choices=("template", "http"))
    sp.add_argument("--base-url", dest="base_url")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_consult)

    sp = sub.add_parser("serve", help="run the local HTTP service")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--store")
    sp.add_argument("--frontend", help="static frontend directory to mount at /")
    sp.add_argument("--codec")
    sp.add_argument("--unet")
    sp.add_argument("--wav")
    sp.add_argument("--min-questions", type=int, dest="min_questions")
    sp.add_argument("--t-start", type=int, dest="t_start")
    sp.add_argument("--fps", type=float)
    sp.add_argument("--ref-energy", type=float, dest="ref_energy")
    _add_face_flags(sp)
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MedchatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
