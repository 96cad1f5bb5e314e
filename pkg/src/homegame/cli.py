"""Command line entry points."""
from __future__ import annotations

import json

import click

from .agent import PolicyAgent, build_training_set, train_bc
from .config import load_config, render_config
from .eliminator import evaluate_auc, score_entities
from .expert import solve
from .harness import (
    EpisodeComponents,
    PipelineFlags,
    build_splits,
    make_ground_truth,
    perturb_goal,
    run_episode,
    save_trajectory,
)
from .lmbridge import (
    CacheBackend,
    HttpBackend,
    OracleBackend,
    goal_relevant_entities,
)
from .planner import ExampleBank, evaluate_plans, generate_plan
from .policy import init_params, load_params, save_params
from .scene import generate_scene
from .tracker import evaluate_tracker
from .world import parse_command, permissible_actions, render_observation
from .world import step as world_step


def _make_bridge(config, backend: str, cache: str | None, replay: bool):
    if backend == "oracle":
        bridge = OracleBackend(make_ground_truth([]), config.oracle)
    elif backend == "http":
        if config.http is None:
            raise click.UsageError("http backend requires an [http] config section")
        bridge = HttpBackend(config.http)
    else:
        raise click.UsageError(f"unknown backend {backend}")
    if cache:
        bridge = CacheBackend(None if replay else bridge, cache, replay=replay)
    return bridge


def _oracle_for(entries, scene_config, config):
    pairs = [e.materialize(scene_config) for e in entries]
    return pairs, OracleBackend(make_ground_truth(pairs), config.oracle)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="INI configuration file.")
@click.pass_context
def main(ctx, config_path):
    """Household text-game simulator with an LM-assisted agent pipeline."""
    ctx.obj = load_config(config_path)


@main.command("show-config")
@click.pass_obj
def show_config(config):
    """Print the fully resolved configuration."""
    click.echo(render_config(config), nl=False)


@main.command("gen-scenes")
@click.option("--seeds", default="0:10", help="Seed range start:stop.")
@click.option("--out", type=click.Path(), default=None, help="Write scene summaries as JSONL.")
@click.pass_obj
def gen_scenes(config, seeds, out):
    """Generate scenes and report their tasks."""
    start, stop = (int(x) for x in seeds.split(":"))
    rows = []
    for seed in range(start, stop):
        state, task = generate_scene(seed, config.scene)
        rows.append({
            "seed": seed, "goal": task.goal_text, "task_type": task.task_type,
            "receptacles": len(state.receptacles), "objects": len(state.objects),
        })
        click.echo(f"seed {seed}: {task.goal_text} "
                   f"({len(state.receptacles)} receptacles, {len(state.objects)} objects)")
    if out:
        with open(out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")


@main.command()
@click.option("--seed", default=0)
@click.option("--out", type=click.Path(), default=None, help="Save the trajectory JSONL.")
@click.pass_obj
def demo(config, seed, out):
    """Solve one scene with the scripted expert and print the transcript."""
    state, task = generate_scene(seed, config.scene)
    d = solve(state, task)
    click.echo(f"Task: {task.goal_text}")
    click.echo(f"Plan: {d.subtask_plan.render()}")
    for step in d.steps:
        click.echo(f"> {step.action}")
        click.echo(step.observation.feedback or "(start)")
    click.echo(f"Solved in {len(d.steps)} steps.")
    if out:
        from .harness import ScriptedActor
        oracle = OracleBackend(make_ground_truth([(state, task)]), config.oracle)
        traj = run_episode(state.clone(), task,
                           EpisodeComponents(bridge=oracle,
                                             actor=ScriptedActor([s.action for s in d.steps])),
                           config.scene)
        save_trajectory(out, traj)
        click.echo(f"Trajectory written to {out}")


@main.command()
@click.option("--out", type=click.Path(), required=True, help="Checkpoint path (.npz).")
@click.option("--condition-on", type=click.Choice(["subtask", "task"]), default="subtask")
@click.pass_obj
def train(config, out, condition_on):
    """Behavior-clone the policy on expert demos from the training split."""
    splits = build_splits(config.splits)
    pairs, oracle = _oracle_for(splits.train, splits.config, config)
    demos = [solve(s, t) for s, t in pairs]
    samples = build_training_set(demos, oracle, condition_on=condition_on)
    click.echo(f"{len(demos)} demos, {len(samples)} training samples")
    params = init_params(config.policy, seed=config.train.shuffle_seed)
    curve = train_bc(samples, params, config.train)
    for row in curve:
        click.echo(f"epoch {row['epoch']}: loss {row['loss']:.4f} "
                   f"acc {row['accuracy']:.3f}")
    save_params(out, params)
    click.echo(f"Checkpoint written to {out}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "seen", "unseen"]), default="seen")
@click.option("--plan/--no-plan", default=True)
@click.option("--eliminate/--no-eliminate", default=True)
@click.option("--track/--no-track", default=True)
@click.option("--perturb", default=None, type=int, help="Goal-paraphrase seed.")
@click.option("--save-dir", type=click.Path(), default=None)
@click.pass_obj
def eval_cmd(config, checkpoint, split, plan, eliminate, track, perturb, save_dir):
    """Run the full pipeline over an evaluation split."""
    from .harness import evaluate_split

    splits = build_splits(config.splits)
    entries = getattr(splits, split)
    train_pairs = [e.materialize(splits.config) for e in splits.train]
    gt = make_ground_truth(train_pairs)
    params = load_params(checkpoint)
    flags = PipelineFlags(plan=plan, eliminate=eliminate, track=track)

    def make_components(state, task):
        gt.register(task, state)
        oracle = OracleBackend(gt, config.oracle)
        goal = task.goal_text if perturb is None else perturb_goal(task.goal_text, perturb)
        return EpisodeComponents(
            bridge=oracle, actor=PolicyAgent(params, oracle), flags=flags,
            plan_override=solve(state.clone(), task).subtask_plan if flags.plan else None,
            tau_r=config.tau_r, tau_o=config.tau_o,
            step_budget=config.step_budget, goal_text_override=goal,
        )

    report = evaluate_split(entries, splits.config, make_components, save_dir)
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command("eval-plan")
@click.option("--perturb-rate", default=0.0, type=float)
@click.option("--seed", default=0, type=int)
@click.pass_obj
def eval_plan(config, perturb_rate, seed):
    """Plan generation accuracy on the training split goals."""
    import random

    splits = build_splits(config.splits)
    pairs, oracle = _oracle_for(splits.train, splits.config, config)
    bank = ExampleBank()
    demos = [solve(s, t) for s, t in pairs]
    for (s, t), d in zip(pairs, demos):
        bank.add(t.goal_text, d.subtask_plan, oracle)
    rng = random.Random(seed)
    generated, references = [], []
    for (s, t), d in zip(pairs, demos):
        goal = t.goal_text
        if rng.random() < perturb_rate:
            goal = perturb_goal(goal, seed)
        generated.append(generate_plan(oracle, bank, goal))
        references.append(d.subtask_plan)
    exact, similarity = evaluate_plans(generated, references, oracle)
    click.echo(json.dumps({"exact_accuracy": exact, "embedding_similarity": similarity}))


@main.command("eval-eliminate")
@click.option("--n-scenes", default=50, type=int)
@click.pass_obj
def eval_eliminate(config, n_scenes):
    """Relevance-scoring AUC against the goal-implied entity classes."""
    aucs, removed = [], []
    for seed in range(n_scenes):
        state, task = generate_scene(seed, config.scene)
        oracle = OracleBackend(make_ground_truth([(state, task)]), config.oracle)
        oracle.bind_task(task)
        obs = render_observation(state, "")
        decisions = score_entities(oracle, task.goal_text, obs,
                                   config.tau_r, config.tau_o)
        relevant = goal_relevant_entities(state, task)
        labels = {1 if dec.entity in relevant else 0 for dec in decisions}
        if len(labels) == 2:
            aucs.append(evaluate_auc(decisions, relevant))
        kept = sum(1 for dec in decisions if dec.kept)
        if decisions:
            removed.append(1 - kept / len(decisions))
    click.echo(json.dumps({
        "mean_auc": sum(aucs) / len(aucs) if aucs else None,
        "mean_masked_fraction": sum(removed) / len(removed),
    }))


@main.command("eval-track")
@click.option("--n-demos", default=50, type=int)
@click.pass_obj
def eval_track(config, n_demos):
    """Tracker completion-detection precision/recall on expert demos."""
    pairs = [generate_scene(seed, config.scene) for seed in range(n_demos)]
    oracle = OracleBackend(make_ground_truth(pairs), config.oracle)
    demos = [solve(s.clone(), t) for s, t in pairs]
    precision, recall = evaluate_tracker(demos, oracle)
    click.echo(json.dumps({"precision": precision, "recall": recall}))


@main.command()
@click.option("--seed", default=0)
@click.pass_obj
def play(config, seed):
    """Interactive text session in a generated scene."""
    state, task = generate_scene(seed, config.scene)
    click.echo(f"Your task is to: {task.goal_text}")
    feedback = ""
    for _ in range(10_000):
        obs = render_observation(state, feedback)
        click.echo(obs.text)
        try:
            raw = click.prompt("> ", prompt_suffix="")
        except (EOFError, click.Abort):
            click.echo("bye")
            return
        if raw.strip() in ("quit", "exit"):
            return
        if raw.strip() == "actions":
            for a in permissible_actions(state):
                click.echo(f"  {a.text}")
            feedback = ""
            continue
        try:
            action = parse_command(raw)
        except ValueError as exc:
            click.echo(f"I don't understand that. ({exc})")
            feedback = ""
            continue
        state, feedback, done = world_step(state, action)
        if done:
            click.echo(feedback)
            click.echo("You won!")
            return


if __name__ == "__main__":
    main()
