"""Exercises the Python bindings end to end on a small synthetic corpus."""

import math
import random
import tempfile
from pathlib import Path

import svpipe_py as sv

SMALL = {
    "synth.n_speakers": "16",
    "synth.utts_per_speaker": "6",
    "synth.max_frames": "300",
    "ubm.components": "8",
    "tv.rank": "10",
    "lda.dim": "4",
    "dplda.l2_grid": "1e-4,1e-3",
    "f2s.hidden": "16",
    "f2s.epochs": "2",
    "s2i.hidden": "16",
    "s2i.epochs": "10",
    "joint.epoch_batches": "5",
    "joint.epochs": "2",
}


def check_metrics():
    m = sv.metrics([3.0, 2.0, 1.0, 0.0], [True, True, False, False])
    assert m["eer"] == 0.0 and m["c_primary"] == 0.0, m
    m = sv.metrics([0.0, 1.0, 2.0, 3.0], [True, True, False, False])
    assert m["eer"] == 1.0, m


def check_plda_conversion():
    rng = random.Random(3)
    d = 3
    a = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(d)]
    b = [[sum(a[i][k] * a[j][k] for k in range(d)) for j in range(d)] for i in range(d)]
    w = [[(1.0 if i == j else 0.0) + 0.1 * b[i][j] for j in range(d)] for i in range(d)]
    plda = sv.Plda([0.1, -0.2, 0.3], b, w)
    dplda = plda.to_dplda()
    for _ in range(20):
        e = [rng.gauss(0, 1) for _ in range(d)]
        t = [rng.gauss(0, 1) for _ in range(d)]
        assert math.isclose(plda.llr(e, t), dplda.score(e, t), abs_tol=1e-9)


def main():
    check_metrics()
    check_plda_conversion()

    corpus = sv.Corpus.synth(seed=2, settings=SMALL)
    dev = corpus.ids("dev")
    assert len(corpus) > len(dev) > 0
    pipe = sv.Pipeline(corpus, seed=2, settings=SMALL)
    print("plda dev ", pipe.plda_dev())
    print("dplda dev", pipe.dplda_dev())

    system = pipe.build_system()
    before = pipe.evaluate(system)
    trained, log = pipe.train_joint(system)
    after = pipe.evaluate(trained)
    print("nn dev before joint", before)
    for row in log:
        print("  epoch %d loss %.4f eer %.4f c_primary %.4f lr %g" % row)
    assert after["c_primary"] <= before["c_primary"] + 1e-12

    a, b = corpus.features(dev[0]), corpus.features(dev[1])
    score = trained.score(a, b)
    assert math.isfinite(score)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "e2e.svm"
        trained.save(str(path))
        again = sv.System.load(str(path))
        assert again.score(a, b) == score
        assert again.embed(a) == trained.embed(a)
        try:
            sv.System.load(str(Path(tmp) / "missing.svm"))
        except OSError:
            pass
        else:
            raise AssertionError("loading a missing model should fail")
    print("smoke test passed")


if __name__ == "__main__":
    main()
