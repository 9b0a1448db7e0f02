import numpy as np
import pytest

from nexusrcl.core import LabelRecord, Provenance, TimeWindow, host, service  # noqa: F401
from nexusrcl.graphs import HetGraphCase
from nexusrcl.hgcn import (
    DivergenceError,
    HgcnConfig,
    LabeledCase,
    ModelError,
    encode,
    gradient_check,
    init_model,
    labeled_from_cases,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    score,
    train_supervised,
)


from util import random_case


def model_for(case, hidden=8, seed=1, **kw):
    cfg = HgcnConfig(hidden_dim=hidden, n_layers=2, seed=seed, **kw)
    return init_model(cfg, case.service_features.shape[1], case.host_features.shape[1]), cfg


class TestEncode:
    def test_zero_edges_depends_on_own_features_only(self):
        rng = np.random.default_rng(0)
        case = random_case(rng, edge_p=0.0)
        case = HetGraphCase(
            **{
                **case.__dict__,
                "e_ss": (),
                "e_sh": (),
                "e_hh": (),
            }
        )
        model, _ = model_for(case)
        z0 = encode(model, case)
        # changing one node's features only changes that node's embedding
        bumped = case.__dict__.copy()
        feats = case.service_features.copy()
        feats[1] += 10.0
        bumped["service_features"] = feats
        z1 = encode(model, HetGraphCase(**bumped))
        assert not np.allclose(z0[1], z1[1])
        mask = np.ones(case.n_nodes, dtype=bool)
        mask[1] = False
        assert np.allclose(z0[mask], z1[mask])

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        case = random_case(rng, n_services=4, n_hosts=3)
        model, _ = model_for(case)
        z = encode(model, case)

        perm_s = rng.permutation(len(case.services))
        perm_h = rng.permutation(len(case.hosts))
        inv_s = np.argsort(perm_s)
        inv_h = np.argsort(perm_h)
        permuted = HetGraphCase(
            case_id=case.case_id,
            window=case.window,
            services=tuple(case.services[i] for i in perm_s),
            hosts=tuple(case.hosts[i] for i in perm_h),
            e_ss=tuple((int(inv_s[a]), int(inv_s[b])) for a, b in case.e_ss),
            e_sh=tuple((int(inv_s[a]), int(inv_h[b])) for a, b in case.e_sh),
            e_hh=tuple((int(inv_h[a]), int(inv_h[b])) for a, b in case.e_hh),
            service_features=case.service_features[perm_s],
            host_features=case.host_features[perm_h],
        )
        zp = encode(model, permuted)
        n_s = len(case.services)
        assert np.allclose(zp[:n_s], z[:n_s][perm_s], atol=1e-9)
        assert np.allclose(zp[n_s:], z[n_s:][perm_h], atol=1e-9)

    def test_isomorphic_cases_identical_embeddings(self):
        rng = np.random.default_rng(2)
        case = random_case(rng)
        clone = HetGraphCase(**{**case.__dict__, "case_id": "case-0001"})
        model, _ = model_for(case)
        assert np.allclose(encode(model, case), encode(model, clone), atol=1e-9)

    def test_directional_isolation_service_host(self):
        # two nodes, one SH edge: host features never reach the service
        svc, hst = service("s0"), host("h0")
        rng = np.random.default_rng(3)
        base = dict(
            case_id="case-0000",
            window=TimeWindow(0, 10, 0),
            services=(svc,),
            hosts=(hst,),
            e_ss=(),
            e_sh=((0, 0),),
            e_hh=(),
            service_features=rng.normal(size=(1, 4)),
        )
        a = HetGraphCase(**base, host_features=np.zeros((1, 3)))
        b = HetGraphCase(**base, host_features=rng.normal(size=(1, 3)) * 50)
        model, _ = model_for(a)
        za, zb = encode(model, a), encode(model, b)
        assert np.allclose(za[0], zb[0])
        assert not np.allclose(za[1], zb[1])

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        case = random_case(rng, f_s=4)
        other = random_case(rng, f_s=6)
        model, _ = model_for(case)
        with pytest.raises(ModelError):
            encode(model, other)


class TestScore:
    def test_untrained_head_uniform(self):
        rng = np.random.default_rng(5)
        case = random_case(rng)
        model, _ = model_for(case)
        out = score(model, case)
        assert np.allclose(out.scores, 1.0 / case.n_nodes)

    def test_scores_sum_to_one(self):
        rng = np.random.default_rng(6)
        for i in range(10):
            case = random_case(rng, n_services=int(rng.integers(2, 6)), n_hosts=int(rng.integers(1, 4)))
            model, _ = model_for(case, seed=i)
            model.params["w_out"] = rng.normal(size=model.hidden)
            out = score(model, case)
            assert abs(out.scores.sum() - 1.0) < 1e-6
            assert (out.scores >= 0).all()
            assert sorted(out.ranking) == list(range(case.n_nodes))

    def test_argmax_stable_under_logit_scaling(self):
        rng = np.random.default_rng(7)
        case = random_case(rng)
        model, _ = model_for(case)
        model.params["w_out"] = rng.normal(size=model.hidden)
        base = score(model, case).ranking
        model.params["w_out"] = model.params["w_out"] * 3.7
        assert score(model, case).ranking == base

    def test_ties_broken_by_node_index(self):
        rng = np.random.default_rng(8)
        case = random_case(rng)
        model, _ = model_for(case)
        out = score(model, case)  # zero head -> all tied
        assert out.ranking == tuple(range(case.n_nodes))


class TestGradients:
    def test_gradient_check_small_graphs(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for i in range(10):
            case = random_case(
                rng,
                n_services=int(rng.integers(2, 7)),
                n_hosts=int(rng.integers(1, 4)),
                f_s=int(rng.integers(2, 5)),
                f_h=int(rng.integers(2, 4)),
            )
            model, _ = model_for(case, hidden=int(rng.integers(4, 17)), seed=100 + i)
            model.params["w_out"] = rng.normal(size=model.hidden) * 0.5
            target = int(rng.integers(0, case.n_nodes))
            worst = max(worst, gradient_check(model, case, target, epsilon=1e-5))
        assert worst < 1e-4

    def test_unused_relation_has_zero_gradient(self):
        rng = np.random.default_rng(10)
        case = random_case(rng, n_hosts=1)
        case = HetGraphCase(**{**case.__dict__, "e_hh": ()})
        model, _ = model_for(case)
        model.params["w_out"] = rng.normal(size=model.hidden)
        from nexusrcl.hgcn import _zero_grads, prepare_case, supervised_loss

        grads = _zero_grads(model)
        supervised_loss(model, prepare_case(model, case), 0, grads)
        assert np.allclose(grads["w_hh_0"], 0.0)
        assert np.allclose(grads["w_hh_1"], 0.0)

    def test_forward_pure(self):
        rng = np.random.default_rng(11)
        case = random_case(rng)
        model, _ = model_for(case)
        from nexusrcl.hgcn import prepare_case, supervised_loss

        prep = prepare_case(model, case)
        assert supervised_loss(model, prep, 0) == supervised_loss(model, prep, 0)

    def test_epsilon_validated(self):
        rng = np.random.default_rng(12)
        case = random_case(rng)
        model, _ = model_for(case)
        with pytest.raises(ModelError):
            gradient_check(model, case, 0, epsilon=0.5)


class TestPretrain:
    def test_loss_decreases(self):
        rng = np.random.default_rng(13)
        case = random_case(rng)
        model, _ = model_for(case, hidden=8)
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=1e-2, epochs=200, seed=3)
        curve = pretrain(model, [case], cfg)
        assert all(b < a for a, b in zip(curve[:10], curve[1:11]))
        assert curve[-1] <= curve[0]

    def test_zero_features_zero_loss(self):
        rng = np.random.default_rng(14)
        case = random_case(rng)
        case = HetGraphCase(
            **{
                **case.__dict__,
                "service_features": np.zeros_like(case.service_features),
                "host_features": np.zeros_like(case.host_features),
            }
        )
        model, _ = model_for(case)
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=1e-2, epochs=3, seed=3)
        curve = pretrain(model, [case], cfg)
        assert curve[0] == 0.0

    def test_zero_learning_rate_keeps_parameters(self):
        rng = np.random.default_rng(15)
        case = random_case(rng)
        model, _ = model_for(case)
        before = {k: v.copy() for k, v in model.params.items()}
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=0.0, epochs=5, seed=3)
        pretrain(model, [case], cfg)
        for k, v in model.params.items():
            assert np.array_equal(v, before[k])

    def test_divergence_detected(self):
        rng = np.random.default_rng(16)
        case = random_case(rng)
        model, _ = model_for(case)
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=1e6, epochs=200, seed=3)
        with pytest.raises(DivergenceError):
            pretrain(model, [case], cfg)


class TestTrainSupervised:
    def test_overfit_single_case(self):
        rng = np.random.default_rng(17)
        case = random_case(rng)
        model, _ = model_for(case)
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=0.05, epochs=300, seed=3)
        target = 2
        train_supervised(model, [LabeledCase(case, target, 1.0)], cfg)
        out = score(model, case)
        assert out.ranking[0] == target

    def test_shared_root_cause_generalizes(self):
        rng = np.random.default_rng(18)
        cases = [random_case(rng, case_id=f"case-{i:04d}") for i in range(4)]
        model, _ = model_for(cases[0])
        cfg = HgcnConfig(hidden_dim=8, n_layers=2, learning_rate=0.05, epochs=300, seed=3)
        train_supervised(model, [LabeledCase(c, 1, 1.0) for c in cases[:3]], cfg)
        held_out = HetGraphCase(**{**cases[0].__dict__, "case_id": "case-heldout"})
        assert score(model, held_out).ranking[0] == 1

    def test_empty_labeled_set_rejected(self):
        rng = np.random.default_rng(19)
        case = random_case(rng)
        model, _ = model_for(case)
        cfg = HgcnConfig(hidden_dim=8, n_layers=2)
        with pytest.raises(ModelError, match="no supervision"):
            train_supervised(model, [], cfg)

    def test_labeled_from_cases_prefers_human(self):
        rng = np.random.default_rng(20)
        case = random_case(rng)
        case.human_label = LabelRecord(case.case_id, case.services[0], Provenance.HUMAN, 1)
        case.pseudo_label = LabelRecord(case.case_id, case.services[1], Provenance.PSEUDO, 1)
        labeled = labeled_from_cases([case], pseudo_weight=0.5)
        assert labeled[0].target == 0
        assert labeled[0].weight == 1.0

    def test_labeled_from_cases_skips_unlabeled_and_no_fault(self):
        rng = np.random.default_rng(21)
        a = random_case(rng, case_id="case-0000")
        b = random_case(rng, case_id="case-0001")
        b.human_label = LabelRecord(b.case_id, None, Provenance.HUMAN, 1)
        c = random_case(rng, case_id="case-0002")
        c.pseudo_label = LabelRecord(c.case_id, c.services[1], Provenance.PSEUDO, 1)
        labeled = labeled_from_cases([a, b, c], pseudo_weight=0.5)
        assert len(labeled) == 1
        assert labeled[0].case.case_id == "case-0002"
        assert labeled[0].weight == 0.5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(22)
        case = random_case(rng)
        model, _ = model_for(case)
        model.params["w_out"] = rng.normal(size=model.hidden)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        again = load_checkpoint(path)
        assert again.config == model.config
        assert again.f_s == model.f_s and again.f_h == model.f_h
        for name in model.param_names():
            assert np.allclose(again.params[name], model.params[name], atol=1e-6)

    def test_scores_survive_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        case = random_case(rng)
        model, _ = model_for(case)
        model.params["w_out"] = rng.normal(size=model.hidden)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        again = load_checkpoint(path)
        a = score(model, case)
        b = score(again, case)
        assert a.ranking == b.ranking

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ModelError):
            load_checkpoint(path)
