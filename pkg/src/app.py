from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from domain.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, AppError, app_error, ensure_app_error
from domain.models import BBox, CitySpec, CityStyle, LonLat, TileId
from domain.settings import AppConfig
from services.config_loader import load_config, validate_config
from services.logging_setup import configure_logging, get_run_log_lines

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"
DEFAULT_CENTER = "13.3777,52.5163"
DEFAULT_REGION_TILES = 7
MERGED_MANIFEST_NAME = "train_manifest.jsonl"


# -- 引数の解釈 ----------------------------------------------------------------------
def _floats(text: str, count: int, what: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError as exc:
        raise app_error("E-USAGE", detail=f"{what} must be {count} comma-separated numbers: {text!r}") from exc
    if len(values) != count:
        raise app_error("E-USAGE", detail=f"{what} must be {count} comma-separated numbers: {text!r}")
    return values


def parse_bbox(text: str) -> BBox:
    west, south, east, north = _floats(text, 4, "region")
    bbox = BBox(west, south, east, north)
    if bbox.is_empty():
        raise app_error("E-USAGE", detail=f"empty region {text!r}")
    return bbox


def parse_lonlat(text: str) -> LonLat:
    lon, lat = _floats(text, 2, "center")
    return LonLat(lon, lat)


def parse_tile(text: str) -> TileId:
    try:
        return TileId.parse(text)
    except ValueError as exc:
        raise app_error("E-USAGE", detail=f"tile must be z/x/y, got {text!r}") from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=Path("config.yaml"), help="設定ファイル (YAML)")
    parser.add_argument("--log-level", default=None, help="DEBUG / INFO / WARNING / ERROR")
    parser.add_argument("--jobs", type=int, default=None, help="タイル並列処理のワーカー数")


def _add_ablation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-image", action="store_true", help="条件画像を空にする")
    parser.add_argument("--no-metadata", action="store_true", help="経度・緯度を 0 にする")
    parser.add_argument("--no-prompt", action="store_true", help="キャプションを都市名のみにする")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoforge", description="地図タイル条件付き拡散モデルによる建物フットプリント生成")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="地物データからタイルデータセットを作る")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--geodata", type=Path, help="WGS84 FeatureCollection (GeoJSON)")
    source.add_argument("--synthetic", action="store_true", help="合成都市から作る")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--city", default=None, help="キャプションに入れる都市名")
    p.add_argument("--region", default=None, help="west,south,east,north (度)")
    p.add_argument("--center", default=DEFAULT_CENTER, help="--region 省略時の中心 lon,lat")
    p.add_argument("--tiles", type=int, default=DEFAULT_REGION_TILES, help="--region 省略時の一辺タイル数 (奇数)")
    p.add_argument("--eval-region", default=None, help="評価用に固定する west,south,east,north")
    p.add_argument("--style", choices=[s.value for s in CityStyle], default=None, help="合成都市のスタイル")
    p.add_argument("--seed", type=int, default=None, help="合成都市のシード")
    p.add_argument("--force", action="store_true", help="既存の出力先を上書きする")
    p.add_argument("--offline", action="store_true", help="外部サービスを呼ばずにルールベースのキャプションを使う")
    p.add_argument("--cache-dir", type=Path, default=None)
    _add_common(p)

    p = sub.add_parser("train", help="デノイザとコントロールブランチを学習する")
    p.add_argument("--manifest", type=Path, nargs="+", required=True, help="複数指定すると都市別マニフェストを結合して学習する")
    p.add_argument("--out", type=Path, required=True, help="チェックポイントと損失曲線の出力先")
    p.add_argument("--resume", type=Path, default=None, help="再開するチェックポイント")
    p.add_argument("--steps", type=int, default=None, help="総ステップ数 (再開時も通算)")
    p.add_argument("--seed", type=int, default=None)
    _add_ablation(p)
    _add_common(p)

    p = sub.add_parser("sample", help="チェックポイントからタイルを生成する")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["train", "eval", "all"], default="eval")
    p.add_argument("--tile", dest="tiles", action="append", default=None, help="z/x/y (複数指定可)")
    p.add_argument("--style-city", default=None, help="キャプションの都市名をこの都市に置き換える")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ddim-steps", type=int, default=None)
    _add_ablation(p)
    _add_common(p)

    p = sub.add_parser("vectorize", help="生成タイルを建物ポリゴンに変換する")
    p.add_argument("gen_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--coords", choices=["tile", "wgs84"], default="tile")
    p.add_argument("--threshold", type=int, default=None)
    p.add_argument("--simplify", type=float, default=None, help="Douglas-Peucker の許容誤差 (px)")
    _add_common(p)

    p = sub.add_parser("evaluate", help="生成タイルと正解タイルの形態指標を計算する")
    p.add_argument("gen_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None, help="都市別集計に使うマニフェスト")
    p.add_argument("--features-in", type=Path, nargs=2, metavar=("GEN", "GT"), default=None)
    p.add_argument("--gn-count-mode", choices=["per_tile", "ratio_of_totals"], default=None)
    p.add_argument("--threshold", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("degrade", help="正解タイルから建物を間引いて欠損データを作る")
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    plan = p.add_mutually_exclusive_group(required=True)
    plan.add_argument("--fraction", type=float, help="除去するポリゴンの割合")
    plan.add_argument("--synthetic", action="store_true", help="3 クラスが揃うよう除去率を割り当てる")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--area-weighted", action="store_true")
    _add_common(p)

    p = sub.add_parser("assess", help="Site Cover 比で完全性を分類し採点する")
    p.add_argument("inputs", type=Path, nargs="+", help="GEN_DIR DEGRADED_DIR (--synthetic 時は GT_DIR)")
    p.add_argument("--synthetic", action="store_true", help="正解タイルを生成結果の代わりに使う検証モード")
    p.add_argument("--truth", type=Path, default=None, help="真のクラス表 (既定: DEGRADED_DIR/truth.csv)")
    p.add_argument("--complete-dir", type=Path, default=None, help="MIoU 用の完全な正解タイル")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--area-weighted", action="store_true")
    p.add_argument("--mapped-max-ratio", type=float, default=None)
    p.add_argument("--partial-max-ratio", type=float, default=None)
    p.add_argument("--threshold", type=int, default=None)
    _add_common(p)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


# -- 設定 ----------------------------------------------------------------------------
def resolve_config(args: argparse.Namespace) -> AppConfig:
    """config.yaml を読み、コマンドラインの指定で上書きして再検証する。"""

    config = load_config(args.config)
    if args.jobs is not None:
        config.jobs = args.jobs
    threshold = getattr(args, "threshold", None)
    if threshold is not None:
        config.vector = replace(config.vector, threshold=threshold)
    if getattr(args, "simplify", None) is not None:
        config.vector = replace(config.vector, simplify_tolerance=args.simplify)
    if args.command == "train" and args.seed is not None:
        config.train = replace(config.train, seed=args.seed)
    if args.command == "sample":
        if args.seed is not None:
            config.sample = replace(config.sample, seed=args.seed)
        if args.ddim_steps is not None:
            config.sample = replace(config.sample, ddim_steps=args.ddim_steps)
    if args.command == "build-dataset":
        if args.style is not None:
            config.synthetic = replace(config.synthetic, style=args.style)
        if args.seed is not None:
            config.synthetic = replace(config.synthetic, seed=args.seed)
    if getattr(args, "gn_count_mode", None) is not None:
        config.metrics = replace(config.metrics, gn_count_mode=args.gn_count_mode)
    if args.command == "assess":
        if args.mapped_max_ratio is not None:
            config.completeness = replace(config.completeness, mapped_max_ratio=args.mapped_max_ratio)
        if args.partial_max_ratio is not None:
            config.completeness = replace(config.completeness, partial_max_ratio=args.partial_max_ratio)
    if getattr(args, "area_weighted", False):
        config.completeness = replace(config.completeness, area_weighted=True)
    return validate_config(config)


def write_resolved_config(config: AppConfig, out_dir: Path | None) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG).write_text(json.dumps(config.as_dict(), ensure_ascii=False, indent=2), encoding="utf-8")


def _ablation(args: argparse.Namespace):
    from model.batch import Ablation

    return Ablation(no_image=args.no_image, no_metadata=args.no_metadata, no_prompt=args.no_prompt)


# -- サブコマンド --------------------------------------------------------------------
def cmd_build_dataset(args: argparse.Namespace, config: AppConfig) -> int:
    from data.store import ResponseCache
    from geo.synthcity import generate_city
    from geo.tilegrid import region_around
    from io_utils.geodata import parse_geodata
    from services.captioner import Captioner
    from services.dataset_builder import DatasetBuilder, eval_region_tiles
    from services.ingest import SplitPolicy

    z = config.tiles.zoom
    if args.region:
        region = parse_bbox(args.region)
    else:
        region = region_around(parse_lonlat(args.center), z, args.tiles)

    if args.synthetic:
        synth = config.synthetic
        spec = CitySpec(
            seed=synth.seed,
            style=CityStyle(synth.style),
            block_min_m=synth.block_min_m,
            block_max_m=synth.block_max_m,
            densities=dict(synth.densities),
            city_name=args.city,
        )
        features = generate_city(spec, region, zoom=z, tile_size=config.tiles.size, raster=config.raster)
        city = spec.resolved_city_name
    else:
        if not args.geodata.is_file():
            raise app_error("E-PATH-NOTFOUND", subject=str(args.geodata))
        features = parse_geodata(args.geodata, config.ingest)
        city = args.city or args.geodata.stem

    policy = SplitPolicy(config.ingest.eval_fraction, config.ingest.split_seed)
    if args.eval_region:
        policy = replace(policy, eval_tiles=eval_region_tiles(parse_bbox(args.eval_region), z))

    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise app_error("E-OUTDIR-EXISTS", subject=str(out_dir))
    cache = None if args.offline else ResponseCache.from_settings(config.cache, args.cache_dir)
    captioner = Captioner.from_settings(config.ingest, cache, offline=args.offline)
    builder = DatasetBuilder(config, captioner, jobs=config.jobs)
    result = builder.build(features, region, out_dir, city, split_policy=policy, force=True)
    write_resolved_config(config, out_dir)
    print(f"{len(result.records)} records -> {result.manifest_path}")
    return EXIT_OK if not result.errors else EXIT_DATA


def cmd_train(args: argparse.Namespace, config: AppConfig) -> int:
    from services.ingest import merge_manifests
    from services.trainer import Trainer

    trainer = Trainer(config, jobs=config.jobs)
    write_resolved_config(config, args.out)
    manifest = args.manifest[0]
    if len(args.manifest) > 1:
        manifest = Path(args.out) / MERGED_MANIFEST_NAME
        merge_manifests(args.manifest, manifest)
    result = trainer.train(manifest, args.out, ablation=_ablation(args), resume=args.resume, steps=args.steps)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"step {result.state.step}, loss {last:.6f} -> {result.checkpoint_path}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, config: AppConfig) -> int:
    from services.sampler import Sampler

    tiles = [parse_tile(text) for text in args.tiles] if args.tiles else None
    split = None if args.split == "all" else args.split
    sampler = Sampler.from_checkpoint(config, args.checkpoint, jobs=config.jobs)
    result = sampler.generate(
        args.manifest,
        args.out,
        split=split,
        tiles=tiles,
        style_city=args.style_city,
        ablation=_ablation(args),
    )
    write_resolved_config(config, args.out)
    print(f"{len(result.written)} tiles -> {Path(args.out)}")
    return EXIT_OK if not result.errors else EXIT_DATA


def cmd_vectorize(args: argparse.Namespace, config: AppConfig) -> int:
    from services.vectorizer import Vectorizer

    result = Vectorizer(config.vector, jobs=config.jobs).run(args.gen_dir, args.out, coords=args.coords)
    write_resolved_config(config, args.out)
    print(f"{len(result.written)} tiles, {int(result.table['polygons'].sum()) if len(result.table) else 0} polygons -> {args.out}")
    return EXIT_OK if not result.errors else EXIT_DATA


def cmd_evaluate(args: argparse.Namespace, config: AppConfig) -> int:
    from services.evaluator import Evaluator

    features_in = tuple(args.features_in) if args.features_in else None
    result = Evaluator(config, jobs=config.jobs).evaluate(
        args.gen_dir, args.gt_dir, args.out, manifest=args.manifest, features_in=features_in
    )
    write_resolved_config(config, args.out)
    print(json.dumps(result.report.summary(), ensure_ascii=False, indent=2))
    return EXIT_OK if not result.errors else EXIT_DATA


def cmd_degrade(args: argparse.Namespace, config: AppConfig) -> int:
    from services.assessor import Assessor

    result = Assessor(config, jobs=config.jobs).degrade(
        args.gt_dir, args.out, fraction=args.fraction, synthetic=args.synthetic, seed=args.seed
    )
    write_resolved_config(config, args.out)
    print(f"{len(result.truth)} tiles -> {result.truth_path}")
    return EXIT_OK if not result.errors else EXIT_DATA


def cmd_assess(args: argparse.Namespace, config: AppConfig) -> int:
    from services.assessor import Assessor

    assessor = Assessor(config, jobs=config.jobs)
    if args.synthetic:
        if len(args.inputs) != 1:
            raise app_error("E-USAGE", detail="--synthetic takes exactly one ground-truth directory")
        out_dir = args.out or Path("assessment")
        result = assessor.run_synthetic(args.inputs[0], out_dir, seed=args.seed)
    else:
        if len(args.inputs) != 2:
            raise app_error("E-USAGE", detail="assess takes GEN_DIR and DEGRADED_DIR")
        out_dir = args.out
        result = assessor.assess(
            args.inputs[0], args.inputs[1], truth_path=args.truth, complete_dir=args.complete_dir, out_dir=out_dir
        )
    write_resolved_config(config, out_dir)
    print(result.text)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, AppConfig], int]] = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "vectorize": cmd_vectorize,
    "evaluate": cmd_evaluate,
    "degrade": cmd_degrade,
    "assess": cmd_assess,
}


def _report_failure(err: AppError) -> int:
    print(f"エラー: {err}", file=sys.stderr)
    help_text = err.help_text()
    if help_text:
        print(help_text, file=sys.stderr)
    tail = get_run_log_lines()[-5:]
    if tail:
        print("--- 直近のログ ---", file=sys.stderr)
        print("\n".join(tail), file=sys.stderr)
    return err.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        # argparse は使い方の誤りを 2 で返す
        return EXIT_USAGE if exc.code == 2 else int(exc.code or 0)
    try:
        config = resolve_config(args)
    except AppError as err:
        configure_logging(level_override=args.log_level)
        return _report_failure(err)
    configure_logging(config.logging, level_override=args.log_level)
    logger.info("Resolved config for %s: %s", args.command, json.dumps(config.as_dict(), ensure_ascii=False, sort_keys=True))
    try:
        return COMMANDS[args.command](args, config)
    except AppError as err:
        logger.error("%s failed: %s", args.command, err.for_log())
        return _report_failure(err)
    except Exception as exc:  # pragma: no cover - 想定外の例外
        logger.exception("Unexpected failure in %s", args.command)
        return _report_failure(ensure_app_error(exc))


if __name__ == "__main__":
    raise SystemExit(main())
