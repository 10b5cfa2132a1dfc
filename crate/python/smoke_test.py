"""Smoke test for the stcmix extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import math
import tempfile

import stcmix


def check_mixing():
    x = stcmix.Tensor.uniform([4, 3, 4, 8, 8], seed=1)
    for op in stcmix.OPERATORS:
        out = stcmix.mix(op, x, seed=2, lam=1.0)
        assert out.mixed.bitwise_eq(x), op
        assert out.lam == 1.0
    out = stcmix.mix("st_cutmix", x, seed=3)
    assert out.mixed.shape == x.shape
    assert 0.0 <= out.lam <= 1.0

    ones = stcmix.Tensor([2, 4, 2, 3, 3], [1.0] * 144)
    zeros = stcmix.Tensor.zeros([2, 4, 2, 3, 3])
    cm = stcmix.cmmc_mix(ones, zeros, seed=4)
    assert abs(cm.mixed.mean() - cm.lam) < 1e-12


def check_encoder_and_losses():
    enc = stcmix.Encoder(3, (4, 8, 8), seed=0)
    x = stcmix.Tensor.uniform([2, 3, 4, 8, 8], seed=5)
    z = enc.forward(x)
    assert z.shape == [2, enc.output_dim]
    rows = [math.sqrt(sum(v * v for v in z.data[i * enc.output_dim:(i + 1) * enc.output_dim])) for i in range(2)]
    assert all(abs(r - 1.0) < 1e-9 for r in rows)

    q = stcmix.Queue(16)
    loss, acc = stcmix.info_nce(z, z, q)
    assert loss < 1e-12 and acc == 1.0
    loss_mix, _ = stcmix.imix_loss(z, z, q, partner=[1, 0], lambdas=[0.5])
    assert loss_mix > 0.0

    with tempfile.TemporaryDirectory() as d:
        enc.save(d + "/enc")
        again = stcmix.Encoder.load(d + "/enc")
        assert again.forward(x).bitwise_eq(z)


def check_retrieval():
    g = stcmix.Tensor([3, 2], [1.0, 0.0, 0.0, 1.0, -1.0, 0.0])
    q = stcmix.Tensor([1, 2], [0.9, 0.1])
    assert stcmix.retrieval(g, [0, 1, 2], q, [1], ks=[1, 2]) == [(1, 0.0), (2, 1.0)]


def check_training():
    quick = ["data.clips_per_class=4", "trainer.epochs_mixup=1", "trainer.epochs_cmmc=1",
             "trainer.batch_size=8", "probe.epochs=5"]
    corpus = stcmix.Corpus(quick)
    assert corpus.train_size == 24 and corpus.test_size == 8
    clip, label = corpus.clip("train", 0, modality=2)
    assert clip.shape[0] == 2 and 0 <= label < 8
    enc, trace = corpus.pretrain(modality=1)
    assert len(trace) == 1 and all(math.isfinite(l) for l, _ in trace)
    report = corpus.evaluate(enc)
    assert report["R@1"] <= report["R@5"]
    assert stcmix.config(overrides=["trainer.tau=0.2"])["trainer.tau"] == 0.2


def check_gradcheck():
    results = stcmix.gradcheck()
    assert len(results) >= 8
    assert all(passed for _, _, passed in results), results


if __name__ == "__main__":
    for check in (check_mixing, check_encoder_and_losses, check_retrieval, check_training, check_gradcheck):
        check()
        print(f"ok  {check.__name__}")
    try:
        stcmix.config(overrides=["trainer.nope=1"])
    except ValueError as e:
        print(f"ok  unknown key rejected: {e}")
    else:
        raise SystemExit("unknown key accepted")
