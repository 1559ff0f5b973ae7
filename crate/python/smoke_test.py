"""Quick end-to-end check of the pyssod bindings.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`,
then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import pyssod


def check_geometry():
    assert abs(pyssod.iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-12
    boxes = [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]]
    keep = pyssod.nms(boxes, [0.9, 0.8, 0.7], 0.5)
    assert keep == [0, 2], keep
    # different classes never suppress each other
    keep = pyssod.nms(boxes, [0.9, 0.8, 0.7], 0.5, labels=[0, 1, 0])
    assert sorted(keep) == [0, 1, 2], keep
    probs, box = pyssod.fuse([0.2, 0.8], [0, 0, 10, 10], [0.4, 0.6], [2, 2, 12, 12])
    assert all(abs(p - q) < 1e-12 for p, q in zip(probs, [0.3, 0.7]))
    # boxes are averaged with each model's top confidence as weight (0.8 vs 0.6)
    w = 0.6 / 1.4
    assert all(abs(p - q) < 1e-12 for p, q in zip(box, [2 * w, 2 * w, 10 + 2 * w, 10 + 2 * w]))
    try:
        pyssod.iou([0, 0, -1, 1], [0, 0, 1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("degenerate box accepted")


def main():
    check_geometry()

    ds = pyssod.Dataset.generate(count=40, labeled_frac=0.25, seed=3)
    assert len(ds) == 40 and ds.num_labeled == 10 and ds.num_unlabeled == 30
    image_id, pixels, anns = ds.sample(0)
    assert len(pixels) == 3 and len(pixels[0]) == 64
    print(ds, image_id, "annotations:", anns)

    cfg = pyssod.TrainConfig(
        mode="instant-star", total_steps=20, decay_points="16,18", batch_size=4, tau=0.5
    )
    assert cfg.mode == "instant-star" and cfg.total_steps == 20
    assert "lambda_u" in pyssod.TrainConfig.keys()
    try:
        cfg.set("no_such_key", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    trainer = pyssod.Trainer(ds, cfg)
    rows = trainer.advance(5)
    assert [r["step"] for r in rows] == [0, 1, 2, 3, 4], rows
    assert all(math.isfinite(r["loss_total"]) for r in rows)
    rows += trainer.advance(15)
    assert trainer.done and trainer.step == 20
    print("last step:", rows[-1])

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "final.ckpt")
        trainer.save_checkpoint(path)
        det = pyssod.Detector.load(path)
        assert det.has_partner and det.num_params > 0
        dets = det.detect(ds, 0)
        for box, cls, conf in dets:
            assert 0 <= cls < 3 and 0.0 <= conf <= 1.0 and len(box) == 4
        ev = det.evaluate(ds, split="labeled")
        assert 0.0 <= ev["ap50"] <= 1.0
        pq = det.pseudo_quality(ds, tau=0.3, corectify=True)
        print("eval:", ev["ap50"], "pseudo quality:", pq)

        saved = os.path.join(tmp, "data")
        h = ds.save(saved)
        again = pyssod.Dataset.load(saved)
        assert len(again) == 40 and again.save(os.path.join(tmp, "data2")) == h

    print("smoke test OK")


if __name__ == "__main__":
    main()
