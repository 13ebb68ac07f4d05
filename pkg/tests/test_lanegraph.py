import json

import numpy as np
import pytest

from lanepred.geom import Polyline, arclength, project
from lanepred.lanegraph import (
    LaneGraph,
    LaneSegment,
    ReferenceLane,
    expand_forward,
    extract_reference_lanes,
    graph_from_dict,
    graph_to_dict,
    load_lane_graph,
    nearby_segments,
    resample_reference,
    save_lane_graph,
)


def straight(seg_id, x0, x1, y=0.0, succ=(), left=None, right=None, points=5):
    xs = np.linspace(x0, x1, points)
    line = Polyline(np.column_stack([xs, np.full(points, y)]))
    return LaneSegment(seg_id, line, tuple(succ), left, right)


def arc(seg_id, center, radius, a0, a1, succ=(), points=15):
    theta = np.linspace(a0, a1, points)
    pts = np.column_stack([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)])
    return LaneSegment(seg_id, Polyline(pts), tuple(succ))


def t_intersection_graph():
    """Approach along +x ending at the origin, then straight/left/right branches."""
    r = 8.0
    approach = straight(0, -60, 0, succ=(1, 3, 5))
    ahead = straight(1, 0, 8, succ=(2,))
    ahead2 = straight(2, 8, 60)
    left_arc = arc(3, (0, r), r, -np.pi / 2, 0.0, succ=(4,))
    left_out = LaneSegment(4, Polyline([(r, r), (r, 60)]))
    right_arc = arc(5, (0, -r), r, np.pi / 2, 0.0, succ=(6,))
    right_out = LaneSegment(6, Polyline([(r, -r), (r, -60)]))
    return LaneGraph([approach, ahead, ahead2, left_arc, left_out, right_arc, right_out])


class TestGraphValidation:
    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            LaneGraph([straight(1, 0, 10), straight(1, 10, 20)])

    def test_dangling_successor_rejected(self):
        with pytest.raises(ValueError, match="missing successor"):
            LaneGraph([straight(1, 0, 10, succ=(9,))])

    def test_dangling_neighbor_rejected(self):
        with pytest.raises(ValueError, match="missing neighbor"):
            LaneGraph([straight(1, 0, 10, left=7)])


class TestNearbySegments:
    def test_single_lane_hit(self):
        g = LaneGraph([straight(3, -20, 20)])
        assert nearby_segments(g, (0, 1), 5.0) == [3]

    def test_far_from_everything(self):
        g = LaneGraph([straight(3, -20, 20)])
        assert nearby_segments(g, (0, 100), 5.0) == []

    def test_three_lane_corridor_ordering(self):
        g = LaneGraph(
            [
                straight(10, -20, 20, y=0.0),
                straight(11, -20, 20, y=3.5),
                straight(12, -20, 20, y=-3.5),
            ]
        )
        ids = nearby_segments(g, (0, 0.2), radius=20.0)
        # middle first, then the closer side, then the farther side
        dists = {10: 0.2, 11: 3.3, 12: 3.7}
        assert ids == sorted(dists, key=lambda i: dists[i])

    def test_tie_broken_by_id(self):
        g = LaneGraph([straight(5, -20, 20, y=2.0), straight(2, -20, 20, y=-2.0)])
        assert nearby_segments(g, (0, 0), radius=5.0) == [2, 5]

    def test_rejects_nonpositive_radius(self):
        g = LaneGraph([straight(1, 0, 10)])
        with pytest.raises(ValueError):
            nearby_segments(g, (0, 0), 0.0)


class TestExpandForward:
    def test_linear_chain(self):
        g = LaneGraph(
            [straight(1, 0, 30, succ=(2,)), straight(2, 30, 60, succ=(3,)), straight(3, 60, 90)]
        )
        lanes = expand_forward(g, 1, horizon=80.0)
        assert len(lanes) == 1
        assert lanes[0].source_ids == (1, 2, 3)
        assert arclength(lanes[0].path) == pytest.approx(80.0)

    def test_fork_enumerates_branches(self):
        g = LaneGraph(
            [
                straight(1, 0, 30, succ=(2, 3)),
                straight(2, 30, 90),
                LaneSegment(3, Polyline([(30, 0), (60, 20)])),
            ]
        )
        lanes = expand_forward(g, 1, horizon=200.0)
        assert sorted(lane.source_ids for lane in lanes) == [(1, 2), (1, 3)]

    def test_y_junction_clipped_lengths(self):
        # 30 m stem and three 50 m branches; horizon 60 clips each chain.
        branches = [
            LaneSegment(2, Polyline([(30, 0), (80, 0)])),
            LaneSegment(3, Polyline([(30, 0), (30 + 50 * np.cos(0.5), 50 * np.sin(0.5))])),
            LaneSegment(4, Polyline([(30, 0), (30 + 50 * np.cos(0.5), -50 * np.sin(0.5))])),
        ]
        g = LaneGraph([straight(1, 0, 30, succ=(2, 3, 4))] + branches)
        lanes = expand_forward(g, 1, horizon=60.0)
        assert len(lanes) == 3
        for lane in lanes:
            assert arclength(lane.path) == pytest.approx(60.0, abs=1e-9)
            assert lane.source_ids[0] == 1

    def test_dead_end_before_horizon(self):
        g = LaneGraph([straight(1, 0, 30, succ=(2,)), straight(2, 30, 45)])
        lanes = expand_forward(g, 1, horizon=500.0)
        assert len(lanes) == 1
        assert arclength(lanes[0].path) == pytest.approx(45.0)

    def test_cycle_terminates_at_revisit(self):
        a = straight(1, 0, 30, succ=(2,))
        b = LaneSegment(2, Polyline([(30, 0), (30, 30)]), successors=(1,))
        g = LaneGraph([a, b])
        lanes = expand_forward(g, 1, horizon=1e6)
        assert len(lanes) == 1
        assert lanes[0].source_ids == (1, 2)

    def test_unknown_seed(self):
        g = LaneGraph([straight(1, 0, 10)])
        with pytest.raises(KeyError):
            expand_forward(g, 99, 10.0)


def agent_past(x_end, y=0.0, heading=(1.0, 0.0), steps=10, speed=8.0, dt=0.1):
    h = np.asarray(heading, dtype=float)
    h = h / np.hypot(*h)
    offsets = -speed * dt * np.arange(steps - 1, -1, -1)
    return np.array([x_end, y]) + offsets[:, None] * h


class TestExtractReferenceLanes:
    def test_single_straight_lane_yields_one(self):
        g = LaneGraph([straight(1, -60, 0, succ=(2,)), straight(2, 0, 60)])
        lanes = extract_reference_lanes(g, agent_past(-10), l_max=3, horizon=50.0)
        assert len(lanes) == 1
        assert lanes[0].source_ids == (1, 2)
        # path starts at the agent's projected position
        assert np.allclose(lanes[0].path.points[0], [-10, 0], atol=1e-9)

    def test_t_intersection_three_continuations(self):
        lanes = extract_reference_lanes(t_intersection_graph(), agent_past(-12), 3, horizon=60.0)
        assert len(lanes) == 3
        firsts = {lane.source_ids[1] for lane in lanes}
        assert firsts == {1, 3, 5}

    def test_l_max_one_picks_heading_aligned(self):
        lanes = extract_reference_lanes(t_intersection_graph(), agent_past(-12), 1, horizon=60.0)
        assert len(lanes) == 1
        assert lanes[0].source_ids[:2] == (0, 1)  # straight continuation wins

    def test_off_map_agent_gives_empty(self):
        g = LaneGraph([straight(1, -60, 60)])
        assert extract_reference_lanes(g, agent_past(-10, y=200.0), 3, 50.0) == []

    def test_neighbor_lane_admitted_for_lane_change(self):
        g = LaneGraph(
            [
                straight(1, -60, 60, y=0.0, left=2),
                straight(2, -60, 60, y=3.5, right=1),
            ]
        )
        lanes = extract_reference_lanes(g, agent_past(-10, y=0.0), 3, horizon=50.0, search_radius=2.0)
        ids = {lane.source_ids for lane in lanes}
        assert (1,) in ids and (2,) in ids

    def test_overlapping_chains_pruned(self):
        # Two seeds produce chains [1, 2] and [2]; they overlap fully on 2.
        g = LaneGraph([straight(1, -30, 10, succ=(2,)), straight(2, 10, 80)])
        lanes = extract_reference_lanes(g, agent_past(-2), 3, horizon=60.0, search_radius=15.0)
        assert len(lanes) == 1

    def test_deterministic_and_prefix_stable(self):
        g = t_intersection_graph()
        past = agent_past(-12)
        full = extract_reference_lanes(g, past, 3, 60.0)
        again = extract_reference_lanes(g, past, 3, 60.0)
        assert [l.source_ids for l in full] == [l.source_ids for l in again]
        for l_max in (1, 2, 3):
            prefix = extract_reference_lanes(g, past, l_max, 60.0)
            assert [l.source_ids for l in prefix] == [l.source_ids for l in full[:l_max]]

    def test_scores_descending_and_chains_connected(self):
        g = t_intersection_graph()
        lanes = extract_reference_lanes(g, agent_past(-12), 3, 60.0)
        scores = [lane.score for lane in lanes]
        assert scores == sorted(scores, reverse=True)
        for lane in lanes:
            for a, b in zip(lane.source_ids, lane.source_ids[1:]):
                assert b in g.segments[a].successors

    def test_requires_two_past_points(self):
        g = LaneGraph([straight(1, -60, 60)])
        with pytest.raises(ValueError):
            extract_reference_lanes(g, np.array([[0.0, 0.0]]), 3, 50.0)

    def test_stationary_past_rejected(self):
        g = LaneGraph([straight(1, -60, 60)])
        past = np.zeros((10, 2))
        with pytest.raises(ValueError, match="heading"):
            extract_reference_lanes(g, past, 3, 50.0)


class TestResampleReference:
    def test_uniform_spacing_on_straight_lane(self):
        lane = ReferenceLane(Polyline([(0, 0), (90, 0)]), (1,))
        pts = resample_reference(lane, t_f=30, speed=30.0)
        assert pts.shape == (30, 2)
        assert np.allclose(np.diff(pts[:, 0]), 3.0)
        assert pts[0, 0] == pytest.approx(3.0)
        assert pts[-1, 0] == pytest.approx(90.0)

    def test_short_lane_compresses_spacing(self):
        lane = ReferenceLane(Polyline([(0, 0), (12, 0)]), (1,))
        pts = resample_reference(lane, t_f=30, speed=30.0)
        assert pts[-1].tolist() == [12.0, 0.0]
        assert np.allclose(np.diff(pts[:, 0]), 12.0 / 30)

    def test_min_travel_guards_stationary(self):
        lane = ReferenceLane(Polyline([(0, 0), (90, 0)]), (1,))
        pts = resample_reference(lane, t_f=10, speed=0.0)
        assert pts[-1, 0] == pytest.approx(5.0)

    def test_curved_lane_matches_arclength_walk(self):
        theta = np.linspace(-np.pi / 2, 0, 200)
        path = Polyline(np.column_stack([40 * np.cos(theta), 40 + 40 * np.sin(theta)]))
        lane = ReferenceLane(path, (1,))
        t_f, speed = 30, 9.0
        pts = resample_reference(lane, t_f, speed)
        travel = speed * t_f * 0.1
        for k, q in enumerate(pts, start=1):
            fc = project(path, q)
            assert abs(fc.n) < 1e-9
            assert fc.s == pytest.approx(travel * k / t_f, abs=1e-9)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        g = t_intersection_graph()
        path = tmp_path / "graph.json"
        save_lane_graph(g, path)
        loaded = load_lane_graph(path)
        assert sorted(loaded.segments) == sorted(g.segments)
        for sid, seg in g.segments.items():
            other = loaded.segments[sid]
            assert np.array_equal(other.centerline.points, seg.centerline.points)
            assert other.successors == seg.successors
            assert other.left_neighbor == seg.left_neighbor
            assert other.right_neighbor == seg.right_neighbor

    def test_schema_keys(self):
        data = graph_to_dict(LaneGraph([straight(1, 0, 10, left=None, right=None)]))
        entry = data["segments"][0]
        assert set(entry) == {"id", "centerline", "successors", "left", "right"}

    def test_invalid_payload_rejected(self):
        with pytest.raises(ValueError):
            graph_from_dict({"nope": []})
        with pytest.raises(ValueError):
            graph_from_dict({"segments": [{"id": 1}]})

    def test_dangling_reference_in_file_rejected(self, tmp_path):
        payload = {
            "segments": [
                {"id": 1, "centerline": [[0, 0], [1, 0]], "successors": [2], "left": None, "right": None}
            ]
        }
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="missing successor"):
            load_lane_graph(path)
