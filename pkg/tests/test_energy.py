import json
import warnings

import numpy as np
import pytest

from dualbind import autodiff as ad
from dualbind.autodiff import GradientError, Tensor
from dualbind.data import Complex, featurize
from dualbind.energy import CheckpointError, EnergyModel, NoInteractionWarning, energy, energy_grad_ligand

from helpers import random_complex, random_rigid


@pytest.fixture(scope="module")
def model():
    m = EnergyModel(hidden=16, layers=2, seed=3)
    m.head["head.out_b"].data = np.array([0.05])
    return m


@pytest.fixture(scope="module")
def small():
    return featurize(random_complex(6, 12, seed=1))


def test_separated_complex_has_zero_energy(model):
    c = random_complex(2, 5, seed=0)
    coords = c.coords.copy()
    coords[c.is_ligand] += [50.0, 0.0, 0.0]
    a, x, _ = featurize(c.with_coords(coords))
    with pytest.warns(NoInteractionWarning):
        e = energy(model, a, x)
    assert e.item() == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoInteractionWarning)
        g = energy_grad_ligand(model, a, x)
    np.testing.assert_array_equal(g.data, 0.0)


def test_rigid_motion_invariance(model, small):
    a, x, _ = small
    e0 = energy(model, a, x).item()
    rng = np.random.default_rng(0)
    for _ in range(10):
        r, t = random_rigid(rng)
        assert abs(energy(model, a, x @ r.T + t).item() - e0) / max(1.0, abs(e0)) < 1e-6


def test_doubling_output_layer_doubles_energy(small):
    a, x, _ = small
    m = EnergyModel(hidden=8, seed=1)
    m.head["head.out_b"].data = np.array([0.3])
    e1 = energy(m, a, x).item()
    m.head["head.out_w"].data = m.head["head.out_w"].data * 2
    m.head["head.out_b"].data = m.head["head.out_b"].data * 2
    assert energy(m, a, x).item() == pytest.approx(2 * e1, rel=1e-12)


def test_energy_needs_both_molecules(model):
    a = np.zeros((2, 6))
    a[:, 0] = 1
    a[:, -1] = 1
    with pytest.raises(ValueError, match="ligand and one protein"):
        energy(model, a, np.array([[0.0, 0, 0], [1, 0, 0]]))


def test_ligand_gradient_matches_fd(model, small):
    a, x, lig = small

    def f(t):
        full = ad.untake(t, lig, x.shape) + Tensor(np.where(np.isin(np.arange(len(x)), lig)[:, None], 0.0, x))
        return energy(model, a, full)

    err = ad.finite_difference_check(f, x[lig])
    assert err < 1e-5
    g = energy_grad_ligand(model, a, x)
    assert g.shape == (6, 3)


def test_joint_translation_leaves_gradient_unchanged(model, small):
    a, x, _ = small
    g0 = energy_grad_ligand(model, a, x).data
    g1 = energy_grad_ligand(model, a, x + [3.0, -7.0, 2.5]).data
    np.testing.assert_allclose(g1, g0, atol=1e-9)


def test_detached_ligand_gradient_is_marked(model, small):
    a, x, _ = small
    g = energy_grad_ligand(model, a, x, create_graph=False)
    with pytest.raises(GradientError):
        ad.gradient(ad.sum_(ad.square(g)), model.parameters())
    g2 = energy_grad_ligand(model, a, x, create_graph=True)
    grads = ad.gradient(ad.sum_(ad.square(g2)), model.parameters())
    assert any(np.any(gr.data != 0) for gr in grads)


def test_smooth_across_cutoff_band(model):
    # one protein and one ligand atom; walk the ligand through 0.9*cutoff..cutoff
    base = Complex("s", [0, 1, 2], [False, False, True], [[0, 0, 0], [0, 2.0, 0], [8.5, 0, 0]])
    a, x, _ = featurize(base)
    for d in (8.95, 9.0, 9.05, 9.5, 9.95, 10.0):
        xs = x.copy()
        xs[2, 0] = d

        def f(t):
            full = Tensor(xs[:2])
            return energy(model, a, ad.concat([full, ad.reshape(t, (1, 3))], axis=0))

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoInteractionWarning)
            assert ad.finite_difference_check(f, xs[2], h=1e-6) < 1e-4


def test_permutation_invariance(model, small):
    a, x, _ = small
    perm = np.random.default_rng(2).permutation(len(x))
    assert abs(energy(model, a[perm], x[perm]).item() - energy(model, a, x).item()) < 1e-10


def test_batched_energies_match_single(model):
    from dualbind.batch import batch_complexes

    cs = [random_complex(3, 6, seed=s, cid=f"b{s}") for s in range(3)]
    batched = model.energies(batch_complexes(cs, model.cutoff)).data
    single = [energy(model, *featurize(c)[:2]).item() for c in cs]
    np.testing.assert_allclose(batched, single, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(model.predict(cs, batch_size=2), single, rtol=1e-12, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, model, small):
    a, x, _ = small
    p = tmp_path / "m.ckpt"
    model.save(p, {"mode": "dual"})
    back, meta = EnergyModel.load(p)
    assert meta == {"mode": "dual"}
    assert back.config() == model.config()
    assert energy(back, a, x).item() == energy(model, a, x).item()


def test_checkpoint_errors(tmp_path, model):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("not json")
    with pytest.raises(CheckpointError, match="JSON"):
        EnergyModel.load(bad)
    bad.write_text(json.dumps({"magic": "nope"}))
    with pytest.raises(CheckpointError, match="DUALBIND-CKPT-1"):
        EnergyModel.load(bad)
    p = tmp_path / "m.ckpt"
    model.save(p)
    obj = json.loads(p.read_text())
    obj["params"]["head.bias"]["shape"] = [3]
    obj["params"]["head.bias"]["data"] = [0.0, 0.0, 0.0]
    p.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError, match="head.bias"):
        EnergyModel.load(p)


def test_parameter_count_matches_layout():
    m = EnergyModel(feature_dim=6, hidden=4, layers=1)
    h = 4
    enc = 6 * h + 3 * h + h + (h * h * 2 + 8 * h + h + h * h * 2 + h)
    head = h * h * 2 + 8 * h + h + h + 1
    assert m.n_parameters() == enc + head
