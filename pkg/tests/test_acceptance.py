"""Release gate: eleven end-to-end checks, one test per criterion.

Each test prints a one-line summary with its measured quantities; the pytest
verdict per test is the pass/fail line for that criterion. The heavier
statistical checks share one committed experiment run (200 shifted episodes)
through a module fixture.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import scipy.stats

from reference import brute_force_knn, naive_contrastive, random_loss_instance
from hubseg import cli
from hubseg.core import ClassMask, FeatureMatrix, SeededRng
from hubseg.episodes import EpisodeConfig, generate_synthetic_episode, read_episode, write_episode
from hubseg.experiment import PipelineParams, run_experiment
from hubseg.hubs import build_bipartite_knn, hub_counts, hubness_scores, select_top_hubs
from hubseg.refine import AnchorSet, pc_loss, purity_table
from hubseg.prototypes import PrototypeSet

# Committed experiment configurations. The shifted run below (noise wide
# enough to blur class modes, query rotated half a radian away) reliably
# produces impure hubs, which is exactly the regime the refinement checks
# need; the easy run is the sanity end of the scale.
EASY_CFG = EpisodeConfig(
    n_way=1, n_shot=1, n_query=1, points_per_cloud=1024, dim=32,
    modes_per_class=3, shift=0.0, noise=0.05, seed=5,
)
EASY_PARAMS = PipelineParams(k=5, eta=32)

SHIFT_CFG = EpisodeConfig(
    n_way=1, n_shot=1, n_query=1, points_per_cloud=256, dim=4,
    modes_per_class=3, shift=0.5, noise=0.35, seed=11,
)
SHIFT_PARAMS = PipelineParams(k=5, eta=48)
SHIFT_EPISODES = 200


@pytest.fixture(scope="module")
def shift_run():
    return run_experiment(SHIFT_CFG, SHIFT_EPISODES, ("hub", "fps", "hub+pdo"), SHIFT_PARAMS)


def unit_rows(g, n, d):
    x = g.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def feature(x):
    return FeatureMatrix(x, normalized=True)


def test_01_membership_mass_is_conserved():
    """Sum of hub counts equals n_centers * min(k, n_neighbors), exactly."""
    g = np.random.default_rng(20260816)
    start = time.perf_counter()
    for _ in range(1000):
        nc = int(g.integers(0, 41))
        nn = int(g.integers(1, 51))
        d = int(g.integers(2, 7))
        k = int(g.integers(1, nn + 4))
        graph = build_bipartite_knn(feature(unit_rows(g, nc, d)), feature(unit_rows(g, nn, d)), k)
        counts = hub_counts(graph)
        assert counts.shape == (nn,)
        assert int(counts.sum()) == nc * min(k, nn)
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    print(f"criterion 01 PASS: exact count conservation on 1000 graphs in {elapsed:.2f}s")


def test_02_knn_matches_brute_force():
    """Graph adjacency equals an fsum/tuple-sort oracle on 1000 instances."""
    g = np.random.default_rng(826)
    start = time.perf_counter()
    for case in range(1000):
        small = case < 950
        nc = int(g.integers(1, 41)) if small else int(g.integers(41, 201))
        nn = int(g.integers(1, 41)) if small else int(g.integers(41, 201))
        d = int(g.integers(2, 13))
        k = int(g.integers(1, nn + 2))
        if case % 20 == 0:
            # sample neighbors from a small pool: bitwise-equal duplicate
            # rows force exact similarity ties through the tie-break
            pool = unit_rows(g, int(g.integers(1, 4)), d)
            nb = pool[g.integers(0, pool.shape[0], nn)]
        else:
            nb = unit_rows(g, nn, d)
        if case % 10 == 5 and nc <= nn:
            c = nb[:nc]
            self_map = np.arange(nc)
            graph = build_bipartite_knn(feature(c), feature(nb), k,
                                        exclude_self=True, self_map=self_map)
            expected = brute_force_knn(c, nb, k, self_map=self_map.tolist())
        else:
            c = unit_rows(g, nc, d)
            graph = build_bipartite_knn(feature(c), feature(nb), k)
            expected = brute_force_knn(c, nb, k)
        assert [row.tolist() for row in graph.adjacency] == expected
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    print(f"criterion 02 PASS: oracle equality on 1000 instances in {elapsed:.2f}s")


def test_03_toy_selection_and_purity():
    """Hand-checkable planar toy: hub ranking, tie-break and purity flags.

    Support points sit at {0,20,40,60,90,120,150,180} degrees with labels
    [1,1,2,2,0,0,0,0]; query points at {12,33,56} degrees carry [1,2,2].
    With k=3 the counts are (1,2,3,2,1,0,0,0), so eta=2 picks n2 and then
    n1 over n3 by the index tie-break. n2 is hit by centers labeled
    {1,2,2} -> purity 2/3, kept; n1 by {1,2} -> purity 1/2, flagged bad.
    """
    from reference import planar

    support = planar([0, 20, 40, 60, 90, 120, 150, 180])
    support_labels = np.array([1, 1, 2, 2, 0, 0, 0, 0])
    query = planar([12, 33, 56])
    query_labels = np.array([1, 2, 2])

    graph = build_bipartite_knn(feature(query), feature(support), k=3)
    assert [row.tolist() for row in graph.adjacency] == [[1, 0, 2], [2, 1, 3], [3, 2, 4]]
    scores = hubness_scores(graph)
    assert hub_counts(graph).tolist() == [1, 2, 3, 2, 1, 0, 0, 0]

    hubs = select_top_hubs(scores, eta=2)
    assert hubs.indices.tolist() == [2, 1]

    labeled = dataclasses.replace(graph, center_labels=query_labels)
    table = purity_table(labeled, hubs, ClassMask(support_labels), gamma=0.6)
    assert table.purity == pytest.approx([2 / 3, 1 / 2], rel=1e-5)
    assert np.array_equal(table.bad, table.purity < 0.6)
    assert table.bad_indices.tolist() == [1]
    print(
        "criterion 03 PASS: toy picks hubs [2, 1], purity "
        f"[{table.purity[0]:.4f}, {table.purity[1]:.4f}], bad hub = [1]"
    )


def test_04_gradient_check_cli(capsys):
    """`gradcheck` with default settings exits 0 in under five seconds."""
    start = time.perf_counter()
    code = cli.main(["gradcheck"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.startswith("PASS")
    assert elapsed < 5.0
    print(f"criterion 04 PASS: {out.strip().splitlines()[0]} in {elapsed:.2f}s")


def closed_form_instance(n_neg):
    anchors = AnchorSet(
        features=np.array([[1.0, 0.0]]),
        labels=np.array([1]),
        weights=np.array([1.0]),
        is_bad_hub=np.array([False]),
    )
    feats = np.vstack([[1.0, 0.0]] + [[0.0, 1.0], [0.0, -1.0]][:n_neg])
    labels = np.arange(1, n_neg + 2)
    protos = PrototypeSet(feats, labels, tuple(f"hub:{i}" for i in range(n_neg + 1)))
    return anchors, protos


def test_05_loss_closed_forms():
    """Aligned anchor with 1 or 2 orthogonal negatives at tau=0.1."""
    worst = 0.0
    for n_neg, expected in ((1, math.log1p(math.exp(-10))), (2, math.log1p(2 * math.exp(-10)))):
        anchors, protos = closed_form_instance(n_neg)
        got = pc_loss(anchors, protos, tau=0.1).loss
        rel = abs(got - expected) / expected
        worst = max(worst, rel)
        assert rel <= 1e-10
    print(f"criterion 05 PASS: closed-form losses match, worst relative error {worst:.2e}")


def test_06_weighted_loss_reduces_to_standard():
    """With all weights 1 the loss equals the unweighted oracle, 100 cases."""
    g = np.random.default_rng(66)
    worst = 0.0
    for _ in range(100):
        a, a_labels, _, p, p_labels, tau = random_loss_instance(g)
        anchors = AnchorSet(a, a_labels, np.ones(len(a_labels)), np.zeros(len(a_labels), bool))
        protos = PrototypeSet(p, p_labels, tuple(f"hub:{i}" for i in range(len(p_labels))))
        got = pc_loss(anchors, protos, tau).loss
        expected = naive_contrastive(a, a_labels, p, p_labels, tau)
        diff = abs(got - expected) / max(1.0, abs(expected))
        worst = max(worst, diff)
        assert diff <= 1e-12
    print(f"criterion 06 PASS: 100 reductions to the standard loss, worst error {worst:.2e}")


def test_07_easy_episodes_near_perfect():
    """Clean, unshifted episodes: both strategies reach mean mIoU >= 0.95."""
    start = time.perf_counter()
    report = run_experiment(EASY_CFG, 100, ("hub", "fps"), EASY_PARAMS)
    elapsed = time.perf_counter() - start
    hub_mean = report.aggregates["hub"].mean
    fps_mean = report.aggregates["fps"].mean
    assert hub_mean >= 0.95
    assert fps_mean >= 0.95
    assert elapsed < 60.0
    print(
        f"criterion 07 PASS: 100 easy episodes, hub {hub_mean:.4f} / fps {fps_mean:.4f} "
        f"in {elapsed:.1f}s"
    )


def test_08_hubs_beat_fps_under_shift(shift_run):
    """Paired one-sided t-test on 200 shifted episodes: hub > fps, p < 0.05."""
    hub = np.asarray(shift_run.miou_per_episode["hub"])
    fps = np.asarray(shift_run.miou_per_episode["fps"])
    result = scipy.stats.ttest_rel(hub, fps, alternative="greater")
    diff = float(np.mean(hub - fps))
    assert diff > 0
    assert result.pvalue < 0.05
    print(
        f"criterion 08 PASS: mean mIoU gap {diff:+.4f} over {len(hub)} episodes, "
        f"p = {result.pvalue:.2e}"
    )


def test_09_refinement_raises_proxy(shift_run):
    """Bad-hub episodes: descent raises the own-class alignment proxy >= 95%."""
    with_bad = [d for d in shift_run.refine_diagnostics if d.bad_hub_count >= 1]
    assert len(with_bad) >= 1
    improved = sum(1 for d in with_bad if d.proxy_after > d.proxy_before)
    rate = improved / len(with_bad)
    assert rate >= 0.95
    print(
        f"criterion 09 PASS: proxy improved on {improved}/{len(with_bad)} "
        f"bad-hub episodes ({rate:.1%})"
    )


def test_10_cli_runs_are_reproducible(tmp_path, capsys):
    """Two identical `run` invocations write byte-identical artifacts."""
    config = tmp_path / "run.cfg"
    config.write_text(
        "points_per_cloud = 64\ndim = 4\nshift = 0.5\nnoise = 0.35\nseed = 11\n"
        "k = 5\neta = 16\nopt_steps = 10\nepisodes = 12\n"
        "strategies = hub,fps,mixed:0.5,hub+pdo\n"
        f"out = {tmp_path / 'metrics.csv'}\n"
    )
    assert cli.main(["run", "--config", str(config)]) == 0
    first_metrics = (tmp_path / "metrics.csv").read_bytes()
    first_manifest = (tmp_path / "metrics.csv.manifest").read_bytes()
    assert cli.main(["run", "--config", str(config)]) == 0
    capsys.readouterr()
    assert (tmp_path / "metrics.csv").read_bytes() == first_metrics
    assert (tmp_path / "metrics.csv.manifest").read_bytes() == first_manifest
    print(
        "criterion 10 PASS: repeated runs byte-identical "
        f"({len(first_metrics)} metric bytes, {len(first_manifest)} manifest bytes)"
    )


def test_11_episode_roundtrip(tmp_path):
    """100 random episodes survive write -> read exactly."""
    g = np.random.default_rng(2026)
    path = str(tmp_path / "episode.json")
    for i in range(100):
        n_way = int(g.integers(1, 4))
        cfg = EpisodeConfig(
            n_way=n_way,
            n_shot=int(g.integers(1, 3)),
            n_query=int(g.integers(1, 3)),
            points_per_cloud=int(g.integers(2 * (n_way + 1), 25)),
            dim=int(g.integers(3, 11)),
            modes_per_class=int(g.integers(1, 4)),
            shift=float(g.uniform(0.0, 1.0)),
            noise=float(g.uniform(0.0, 0.4)),
            seed=i,
        )
        episode = generate_synthetic_episode(cfg, SeededRng(cfg.seed, 0))
        write_episode(episode, path)
        assert read_episode(path) == episode
    print("criterion 11 PASS: 100/100 episodes round-tripped exactly")
