"""Episode runner, splits, goal paraphrasing, trajectory persistence."""
import json

import pytest

from homegame.expert import solve
from homegame.harness import (
    EpisodeComponents,
    PERTURB_TABLE,
    PipelineFlags,
    RandomActor,
    ReplayMismatchError,
    ScriptedActor,
    SplitConfig,
    build_splits,
    evaluate_split,
    load_trajectory,
    make_ground_truth,
    perturb_goal,
    replay_trajectory,
    run_episode,
    save_trajectory,
)
from homegame.lmbridge import OracleBackend, OracleConfig
from homegame.scene import generate_scene


@pytest.fixture(scope="module")
def small_splits():
    return build_splits(SplitConfig(n_train=6, n_seen=3, n_unseen=3))


def oracle_for(pairs):
    return OracleBackend(make_ground_truth(pairs), OracleConfig())


class TestPerturbation:
    def test_deterministic(self):
        g = "heat some apple and put it in fridge"
        assert perturb_goal(g, 3) == perturb_goal(g, 3)

    def test_differs_from_input_when_synonyms_exist(self):
        g = "heat some apple and put it in fridge"
        for seed in range(10):
            assert perturb_goal(g, seed) != g

    def test_substitutions_come_from_table(self):
        g = "cool some mug and put it in cabinet"
        out = perturb_goal(g, 1)
        for before, after in zip(g.split(), out.split()):
            if before != after:
                assert PERTURB_TABLE[before] == after

    def test_no_applicable_tokens_returns_input(self):
        assert perturb_goal("xyzzy quux", 0) == "xyzzy quux"

    def test_oracle_resolves_perturbed_goals(self, small_splits):
        pairs = [e.materialize(small_splits.config) for e in small_splits.train]
        gt = make_ground_truth(pairs)
        for _, task in pairs:
            for seed in range(3):
                assert gt.resolve(perturb_goal(task.goal_text, seed)) == task


class TestSplits:
    def test_sizes(self, small_splits):
        assert len(small_splits.train) == 6
        assert len(small_splits.seen) == 3
        assert len(small_splits.unseen) == 3

    def test_seen_reuses_training_rooms(self, small_splits):
        train_scene_seeds = {e.scene_seed for e in small_splits.train}
        for e in small_splits.seen:
            assert e.scene_seed in train_scene_seeds

    def test_unseen_rooms_disjoint(self, small_splits):
        train_scene_seeds = {e.scene_seed for e in small_splits.train}
        for e in small_splits.unseen:
            assert e.scene_seed not in train_scene_seeds

    def test_eval_combos_not_in_training(self, small_splits):
        def combo(entry):
            _, task = entry.materialize(small_splits.config)
            return (task.task_type, task.target_object_class,
                    task.target_receptacle_class)

        train_combos = {combo(e) for e in small_splits.train}
        for e in [*small_splits.seen, *small_splits.unseen]:
            assert combo(e) not in train_combos

    def test_entries_materialize_solvable(self, small_splits):
        for e in [*small_splits.seen, *small_splits.unseen]:
            state, task = e.materialize(small_splits.config)
            demo = solve(state, task)
            assert demo.steps


class TestFlags:
    def test_track_requires_plan(self):
        with pytest.raises(ValueError):
            PipelineFlags(plan=False, track=True)

    def test_dict_round_trip(self):
        f = PipelineFlags(plan=True, eliminate=True, track=True)
        assert f.to_dict() == {"plan": True, "eliminate": True, "track": True}


class TestRunEpisode:
    def test_scripted_expert_completes(self, small_splits):
        entry = small_splits.train[0]
        state, task = entry.materialize(small_splits.config)
        demo = solve(state.clone(), task)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=ScriptedActor([s.action for s in demo.steps])),
            small_splits.config)
        assert traj.done
        assert len(traj.steps) == len(demo.steps)
        assert traj.steps[-1].done

    def test_full_pipeline_tracks_progress(self, small_splits):
        entry = small_splits.train[1]
        state, task = entry.materialize(small_splits.config)
        demo = solve(state.clone(), task)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle,
            actor=ScriptedActor([s.action for s in demo.steps]),
            flags=PipelineFlags(plan=True, eliminate=True, track=True),
            plan_override=demo.subtask_plan),
            small_splits.config)
        assert traj.done
        # terminal observation lets the tracker confirm the final sub-task
        assert traj.final_tracker_p == len(demo.subtask_plan.subtasks) + 1
        indices = [s.subtask_index for s in traj.steps]
        assert indices == sorted(indices)

    def test_budget_exhaustion(self, small_splits):
        entry = small_splits.train[2]
        state, task = entry.materialize(small_splits.config)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=RandomActor(seed=0), step_budget=4),
            small_splits.config)
        assert len(traj.steps) <= 4
        if not traj.done:
            assert len(traj.steps) == 4

    def test_zero_budget(self, small_splits):
        entry = small_splits.train[0]
        state, task = entry.materialize(small_splits.config)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=RandomActor(), step_budget=0),
            small_splits.config)
        assert traj.steps == [] and not traj.done

    def test_actions_recorded_are_permissible(self, small_splits):
        entry = small_splits.train[3]
        state, task = entry.materialize(small_splits.config)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=RandomActor(seed=1), step_budget=15),
            small_splits.config)
        for s in traj.steps:
            assert s.action in s.permissible

    def test_masked_text_differs_when_eliminating(self, small_splits):
        entry = small_splits.train[0]
        state, task = entry.materialize(small_splits.config)
        oracle = oracle_for([(state, task)])
        traj = run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=RandomActor(seed=2),
            flags=PipelineFlags(eliminate=True), step_budget=5),
            small_splits.config)
        assert any(s.masked_text != s.obs_text for s in traj.steps)
        assert all(set(s.kept) <= set(s.receptacles + s.objects) for s in traj.steps)


class TestTrajectoryStore:
    def make_traj(self, small_splits, seed_index=0):
        entry = small_splits.train[seed_index]
        state, task = entry.materialize(small_splits.config)
        demo = solve(state.clone(), task)
        oracle = oracle_for([(state, task)])
        return run_episode(state, task, EpisodeComponents(
            bridge=oracle, actor=ScriptedActor([s.action for s in demo.steps]),
            flags=PipelineFlags(plan=True, track=True),
            plan_override=demo.subtask_plan),
            small_splits.config)

    def test_round_trip(self, small_splits, tmp_path):
        traj = self.make_traj(small_splits)
        path = str(tmp_path / "t.jsonl")
        save_trajectory(path, traj)
        loaded = load_trajectory(path)
        assert loaded.header == traj.header
        assert loaded.done == traj.done
        assert loaded.final_tracker_p == traj.final_tracker_p
        assert [s.__dict__ for s in loaded.steps] == [s.__dict__ for s in traj.steps]

    def test_file_is_jsonl_with_header_and_final(self, small_splits, tmp_path):
        traj = self.make_traj(small_splits)
        path = str(tmp_path / "t.jsonl")
        save_trajectory(path, traj)
        with open(path) as fh:
            lines = [json.loads(line) for line in fh]
        assert lines[0]["type"] == "header"
        assert "config_hash" in lines[0]
        assert lines[-1]["type"] == "final"
        assert all(r["type"] == "step" for r in lines[1:-1])

    def test_replay_byte_exact(self, small_splits, tmp_path):
        traj = self.make_traj(small_splits, 1)
        path = str(tmp_path / "t.jsonl")
        save_trajectory(path, traj)
        assert replay_trajectory(load_trajectory(path))

    def test_replay_detects_tampering(self, small_splits):
        traj = self.make_traj(small_splits, 2)
        traj.steps[0].obs_text += " tampered"
        with pytest.raises(ReplayMismatchError):
            replay_trajectory(traj)


class TestEvaluate:
    def test_report_shape(self, small_splits, tmp_path):
        pairs = [e.materialize(small_splits.config) for e in small_splits.train]
        oracle = oracle_for(pairs)

        def make_components(state, task):
            demo = solve(state.clone(), task)
            return EpisodeComponents(
                bridge=oracle, actor=ScriptedActor([s.action for s in demo.steps]))

        report = evaluate_split(small_splits.train[:4], small_splits.config,
                                make_components, save_dir=str(tmp_path / "out"))
        assert report.completion_rate == 1.0
        assert report.episodes == 4
        assert report.mean_steps > 0
        assert len(report.per_episode) == 4
        assert (tmp_path / "out" / "episode_0000.jsonl").exists()

    def test_empty_split_rejected(self, small_splits):
        with pytest.raises(ValueError):
            evaluate_split([], small_splits.config, None)
