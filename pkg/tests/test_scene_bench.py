"""Scene generation, manifest ingestion, and resumable sweeps."""

import json

import numpy as np
import pytest

from erase.bench import ExperimentPlan, ingest_manifest, run_experiment
from erase.errors import InputValidationError
from erase.io import save_image, save_label_mask
from erase.scene import generate_scene
from erase.tta import TtaConfig

from PIL import Image


class TestGenerateScene:
    def test_same_seed_identical_bytes(self):
        a, b = generate_scene(3), generate_scene(3)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label_map, b.label_map)
        assert np.array_equal(a.gt_background, b.gt_background)

    def test_different_seeds_move_the_target(self):
        positions = set()
        for seed in range(6):
            scene = generate_scene(seed)
            ys, xs = np.nonzero(scene.target_mask)
            positions.add((int(ys.min()), int(xs.min())))
        assert len(positions) > 1

    def test_label_areas_match_declared_geometry(self):
        scene = generate_scene(0, with_distractor=True)
        target_area = int(scene.target_mask.sum())
        assert int((scene.label_map == 0).sum()) == target_area
        # distractor may be partly covered by the target square
        visible_distractor = int((scene.non_target_mask & (1 - scene.target_mask)).sum())
        assert int((scene.label_map == 1).sum()) == visible_distractor
        total = scene.label_map.size
        assert int((scene.label_map == 2).sum()) == total - target_area - visible_distractor

    def test_ground_truth_matches_outside_target(self):
        scene = generate_scene(2)
        outside = scene.target_mask == 0
        assert np.array_equal(scene.image[outside], scene.gt_background[outside])
        assert not np.array_equal(scene.image, scene.gt_background)

    def test_partition_invariant(self):
        scene = generate_scene(5, with_distractor=True)
        assert set(np.unique(scene.label_map)) <= {0, 1, 2}


class TestIngestManifest:
    def test_empty_file_yields_nothing(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert list(ingest_manifest(p)) == []

    def test_three_rows_in_order(self, tmp_path, rng):
        rows = []
        for i in range(3):
            img = tmp_path / f"img{i}.png"
            save_image(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32), img)
            mask = tmp_path / f"mask{i}.png"
            labels = np.full((16, 16), 2, dtype=np.uint8)
            labels[2:4, 2:4] = 0
            save_label_mask(labels, mask)
            rows.append({"sample_id": f"s{i}", "image": img.name, "label_mask": mask.name})
        p = tmp_path / "m.jsonl"
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        entries = list(ingest_manifest(p))
        assert [e.sample_id for e in entries] == ["s0", "s1", "s2"]

    def test_bad_mask_value_is_hard_error(self, tmp_path, rng):
        img = tmp_path / "img.png"
        save_image(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32), img)
        mask = tmp_path / "mask.png"
        Image.fromarray(np.full((16, 16), 3, dtype=np.uint8), "L").save(mask)
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps({"sample_id": "s", "image": img.name,
                                 "label_mask": mask.name}) + "\n")
        entries = list(ingest_manifest(p))
        from erase.io import load_label_mask

        with pytest.raises(InputValidationError):
            load_label_mask(entries[0].label_mask_path)

    def test_duplicate_sample_id_rejected(self, tmp_path, rng):
        img = tmp_path / "img.png"
        save_image(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32), img)
        mask = tmp_path / "mask.png"
        save_label_mask(np.full((16, 16), 2, dtype=np.uint8), mask)
        row = json.dumps({"sample_id": "dup", "image": img.name, "label_mask": mask.name})
        p = tmp_path / "m.jsonl"
        p.write_text(row + "\n" + row + "\n")
        with pytest.raises(InputValidationError):
            list(ingest_manifest(p))


FAST = TtaConfig(iterations=3, rank=2, sample_steps=3)


class TestRunExperiment:
    def test_single_cell_smoke(self, tmp_path):
        plan = ExperimentPlan.sweep(
            tmp_path, ranks=[2], iteration_counts=[3], scene_seeds=[0], base_config=FAST
        )
        paths = run_experiment(plan)
        cell = tmp_path / plan.cells[0].cell_id
        assert (cell / "result.png").is_file()
        assert (cell / "trace.jsonl").is_file()
        assert (cell / "metrics.json").is_file()
        assert paths["csv"].is_file()

    def test_rerun_skips_completed_cells(self, tmp_path):
        plan = ExperimentPlan.sweep(
            tmp_path, ranks=[2], iteration_counts=[3], scene_seeds=[0], base_config=FAST
        )
        run_experiment(plan)
        marker = tmp_path / plan.cells[0].cell_id / "done.json"
        stamp = marker.stat().st_mtime_ns
        run_experiment(plan)
        assert marker.stat().st_mtime_ns == stamp

    def test_grid_emits_all_cells_and_reports_match_resumed_run(self, tmp_path):
        kwargs = dict(ranks=[2, 4], iteration_counts=[2, 3], scene_seeds=[0],
                      base_config=FAST)
        plan = ExperimentPlan.sweep(tmp_path / "full", **kwargs)
        run_experiment(plan)
        assert sum(1 for c in plan.cells) == 4
        csv_full = (tmp_path / "full" / "sweep.csv").read_bytes()

        # interrupted variant: run one cell, then resume the whole plan
        partial = ExperimentPlan.sweep(tmp_path / "part", **kwargs)
        first_only = ExperimentPlan(cells=partial.cells[:1], out_dir=partial.out_dir)
        run_experiment(first_only)
        run_experiment(partial)
        csv_part = (tmp_path / "part" / "sweep.csv").read_bytes()
        assert csv_full == csv_part

    def test_stale_digest_triggers_recompute(self, tmp_path):
        plan = ExperimentPlan.sweep(
            tmp_path, ranks=[2], iteration_counts=[3], scene_seeds=[0], base_config=FAST
        )
        run_experiment(plan)
        marker = tmp_path / plan.cells[0].cell_id / "done.json"
        marker.write_text(json.dumps({"digest": "stale"}))
        run_experiment(plan)
        assert json.loads(marker.read_text())["digest"] == plan.cells[0].digest()


class TestShim:
    def test_loopback_server_round_trip(self, rng):
        import torch

        from erase.backbone import ToyBackbone
        from erase.errors import InputValidationError as IVE
        from erase.lora import inject_adapters
        from erase.shim import BackboneServer, ShimBackbone

        local = ToyBackbone(seed=0)
        local.register_tokens(["stripes", "checker"])
        server = BackboneServer(ToyBackbone(seed=0)).start()
        try:
            remote = ShimBackbone(server.address)
            assert remote.latent_shape == local.latent_shape
            assert remote.image_shape == local.image_shape

            image = rng.uniform(0, 1, size=(64, 64, 3)).astype(np.float32)
            z_local = local.encode(image)
            z_remote = remote.encode(image)
            assert torch.allclose(z_local, z_remote, atol=1e-6)

            remote.register_tokens(["stripes", "checker"])
            z_t = local.schedule.add_noise(
                z_local, 20, torch.randn(z_local.shape,
                                         generator=torch.Generator().manual_seed(2))
            )
            hat_l, attn_l = local.denoise_step(z_t, 20, ["stripes", "checker"])
            hat_r, attn_r = remote.denoise_step(z_t, 20, ["stripes", "checker"])
            assert torch.allclose(hat_l, hat_r, atol=1e-6)
            assert torch.allclose(attn_l, attn_r, atol=1e-6)

            img_l = local.decode(z_local)
            img_r = remote.decode(z_remote)
            assert np.allclose(img_l, img_r, atol=1e-6)
            assert remote.base_checksum() == local.base_checksum()

            with pytest.raises(IVE):
                inject_adapters(remote, rank=4)

            with pytest.raises(IVE):
                remote.denoise_step(z_t, 20, ["unregistered-tag"])
            remote.close()
        finally:
            server.stop()
