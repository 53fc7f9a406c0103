import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from django.conf import settings
from django.core.exceptions import ValidationError

from .aesthetic import DecoderWeights, load_teacher_map, procedural_teacher, save_teacher_map, score_view
from .distill import (DistillConfig, FieldFit, TrainingView, eval_field, fit_field, load_field, save_field,
                      teacher_from_features)
from .exceptions import NoViableViewpointError
from .formats import format_table, score_colors, write_feature_map, write_json, write_ply, write_ppm
from .geometry import CameraIntrinsics, load_cameras, orbit_cameras, save_cameras
from .harness import ablate_search, sampling_ablation, toy_benchmark
from .metrics import ScoreSeries, correlation_table
from .rasterizer import RasterSettings, render_image
from .scene import Scene, SyntheticSpec, load_scene, make_synthetic_scene, save_scene
from .search import FieldObjective, SearchConfig, SuggestionReport, TeacherObjective, suggest_with

logger = logging.getLogger(__name__)


def map_name(index: int) -> str:
    return f"view_{index:03d}.fmap"


class ViewfinderService:
    """Pipeline stages behind the management commands"""

    def __init__(self):
        self.grid = tuple(settings.AESFIELD_TEACHER_GRID)
        self.teacher_channels = settings.AESFIELD_TEACHER_CHANNELS

    def raster_settings(self, threads: int = 1) -> RasterSettings:
        return RasterSettings(tile_size=settings.AESFIELD_TILE_SIZE, near=settings.AESFIELD_NEAR_PLANE,
                              threads=max(1, threads), chunk=settings.AESFIELD_RENDER_CHUNK,
                              forward_precision=settings.AESFIELD_FORWARD_PRECISION)

    def generate_scene(self, spec: SyntheticSpec, seed: int, out: str, views: int = 0,
                       cameras_out: Optional[str] = None, intr: Optional[CameraIntrinsics] = None,
                       arc: float = 2.0 * math.pi) -> Scene:
        """Synthetic scene, optionally with an orbit of cameras around it"""
        try:
            scene = make_synthetic_scene(spec, seed)
            save_scene(scene, out)
            if views and cameras_out:
                low, high = scene.bbox
                cameras = orbit_cameras((low + high) / 2.0, settings.AESFIELD_ORBIT_RADIUS,
                                        settings.AESFIELD_ORBIT_HEIGHT, views, intr, arc)
                save_cameras(cameras, cameras_out)
            return scene
        except Exception as e:
            logger.error(f"Error generating scene: {str(e)}")
            raise

    def load_training_views(self, cameras_path: str, maps_dir: str) -> List[TrainingView]:
        """Pair camera i with view_{i:03d}.fmap"""
        cameras = load_cameras(cameras_path)
        views = []
        for index, camera in enumerate(cameras):
            teacher = load_teacher_map(Path(maps_dir) / map_name(index))
            views.append(TrainingView(camera.pose, camera.intrinsics, teacher))
        logger.info(f"Loaded {len(views)} teacher views from {maps_dir}")
        return views

    def produce_teacher_maps(self, scene_path: str, cameras_path: str, out_dir: str, source: str = 'procedural',
                             seed: int = 0, threads: int = 1) -> List[Path]:
        """
        One FMAP per camera. 'procedural' applies the procedural teacher to color
        renders; 'features' renders the scene's own features through a seeded
        random decoder, which is written next to the maps as decoder.json.
        """
        try:
            scene = load_scene(scene_path)
            cameras = load_cameras(cameras_path)
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            raster = self.raster_settings(threads)

            if source == 'features':
                decoder = DecoderWeights.random(scene.feature_dim, self.teacher_channels, self.grid, seed)
                maps = teacher_from_features(scene, scene.features, cameras, decoder, raster)
                write_json(decoder.to_dict(), out / 'decoder.json')
            else:
                maps = []
                for camera in cameras:
                    image = render_image(scene, camera.pose, camera.intrinsics, 'color', raster)
                    maps.append(procedural_teacher(image, self.grid))

            paths = []
            for index, teacher in enumerate(maps):
                path = out / map_name(index)
                save_teacher_map(teacher, path)
                paths.append(path)
            logger.info(f"Wrote {len(paths)} {source} teacher maps to {out}")
            return paths
        except Exception as e:
            logger.error(f"Error producing teacher maps: {str(e)}")
            raise

    def distill(self, scene_path: str, cameras_path: str, maps_dir: str, cfg: DistillConfig, seed: int,
                out: str, decoder_path: Optional[str] = None, threads: int = 1) -> FieldFit:
        """Fit the field and persist it; a supplied decoder fixes projection and readout"""
        try:
            scene = load_scene(scene_path)
            views = self.load_training_views(cameras_path, maps_dir)
            decoder = None
            if decoder_path:
                with open(decoder_path, 'r', encoding='utf-8') as handle:
                    decoder = DecoderWeights.from_dict(json.load(handle))
            fit = fit_field(scene, views, cfg, seed, decoder, self.raster_settings(threads))
            save_field(scene, fit, out, cfg)
            return fit
        except Exception as e:
            logger.error(f"Error during distillation: {str(e)}")
            raise

    def search(self, scene_path: str, cameras_path: str, cfg: SearchConfig, out: str,
               ply: Optional[str] = None, render_top: int = 0, objective: str = 'field',
               intr: Optional[CameraIntrinsics] = None, run_config: Optional[dict] = None) -> SuggestionReport:
        """Suggest viewpoints, write the report and optional PLY / PPM artifacts"""
        try:
            cameras = load_cameras(cameras_path)
            intr = intr or cameras[0].intrinsics
            raster = self.raster_settings(1)
            if objective == 'teacher':
                scene = load_scene(scene_path)
                view_objective = TeacherObjective(scene, intr, self.grid, raster)
            else:
                scene, fit = load_field(scene_path)
                view_objective = FieldObjective(scene, fit.features, fit.decoder, intr, raster)

            report = suggest_with(view_objective, [c.pose for c in cameras], cfg, scene.diagonal)
            payload = report.to_dict()
            payload['objective'] = objective
            payload['run_config'] = run_config or {}
            write_json(payload, out)
            logger.info(f"Search finished in {report.timing.get('total', 0.0):.2f}s, report at {out}")

            if ply:
                write_ply([s.pose.center for s in report.samples], score_colors([s.score for s in report.samples]), ply)
            for rank, candidate in enumerate(report.candidates[:render_top]):
                image = render_image(scene, candidate.pose, intr, 'color', self.raster_settings(cfg.threads))
                write_ppm(image, Path(out).with_name(f"suggestion_{rank:02d}.ppm"))

            if not report.viable:
                raise NoViableViewpointError("No viable viewpoint: every sampled pose renders empty")
            return report
        except NoViableViewpointError:
            raise
        except Exception as e:
            logger.error(f"Error during viewpoint search: {str(e)}")
            raise

    def evaluate(self, groups: Sequence[Tuple[str, str, str]], out: str, table_out: Optional[str] = None,
                 threads: int = 1, seed: Optional[int] = None) -> List[dict]:
        """Per-scene PLCC/SRCC of predicted vs teacher scores on held-out views"""
        try:
            series, per_view = [], []
            for scene_path, cameras_path, maps_dir in groups:
                scene, fit = load_field(scene_path)
                views = self.load_training_views(cameras_path, maps_dir)
                rows = eval_field(scene, fit, views, self.raster_settings(threads))
                scene_id = Path(scene_path).stem
                if any(row.teacher is None for row in rows):
                    raise ValidationError(f"scene {scene_id}: teacher map without score", code='missing_score')
                series.append(ScoreSeries([r.predicted for r in rows], [r.teacher for r in rows], scene_id))
                per_view.extend({'scene': scene_id, **row._asdict()} for row in rows)

            table = correlation_table(series)
            write_json({'seed': seed, 'table': table, 'views': per_view}, out)
            text = format_table(table, ['scene', 'views', 'plcc', 'srcc'])
            with open(table_out or Path(out).with_suffix('.txt'), 'w', encoding='utf-8') as handle:
                handle.write(text)
            return table
        except Exception as e:
            logger.error(f"Error during evaluation: {str(e)}")
            raise

    def render_views(self, scene_path: str, cameras_path: str, out_dir: str, channels: str = 'color',
                     threads: int = 1) -> List[Path]:
        """view_NNN.ppm color renders and/or view_NNN.fmap feature renders"""
        scene = load_scene(scene_path)
        cameras = load_cameras(cameras_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        raster = self.raster_settings(threads)
        paths = []
        for index, camera in enumerate(cameras):
            if channels in ('color', 'both'):
                image = render_image(scene, camera.pose, camera.intrinsics, 'color', raster)
                paths.append(out / f"view_{index:03d}.ppm")
                write_ppm(image, paths[-1])
            if channels in ('features', 'both'):
                image = render_image(scene, camera.pose, camera.intrinsics, 'features', raster)
                paths.append(out / f"view_{index:03d}.fmap")
                write_feature_map(image, paths[-1])
        logger.info(f"Rendered {len(cameras)} views to {out}")
        return paths

    def score_views(self, scene_path: str, cameras_path: str, source: str = 'field',
                    threads: int = 1) -> List[float]:
        """Score every camera with the fitted field or with the procedural teacher"""
        cameras = load_cameras(cameras_path)
        raster = self.raster_settings(threads)
        if source == 'procedural':
            scene = load_scene(scene_path)
            scores = []
            for camera in cameras:
                image = render_image(scene, camera.pose, camera.intrinsics, 'color', raster)
                scores.append(procedural_teacher(image, self.grid).score)
            return scores
        scene, fit = load_field(scene_path)
        return [score_view(scene, fit.features, c.pose, c.intrinsics, fit.decoder, raster) for c in cameras]

    def ablate(self, seeds: Sequence[int], cfg: SearchConfig, out: str, kind: str = 'all') -> Dict[str, list]:
        """Sampling-density and (K, steps) ablations over toy benchmarks"""
        benchmarks = [toy_benchmark(seed) for seed in seeds]
        results = {'seeds': list(seeds), 'config': cfg.to_dict()}
        if kind in ('sampling', 'all'):
            results['sampling'] = sampling_ablation(benchmarks, cfg)
        if kind in ('search', 'all'):
            results['search'] = ablate_search(benchmarks, cfg)
        write_json(results, out)
        return results


viewfinder_service = ViewfinderService()
