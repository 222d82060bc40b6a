"""Generate a few scenes, train a tiny model briefly, and evaluate it.

Run with ``python3 demos/quickstart.py``; takes well under a minute.
"""

from drivelatent.config import load_config
from drivelatent.evaluation import evaluate_model, toy_pdms
from drivelatent.pipeline import depth_mae, train_stage1, train_stage2
from drivelatent.scenario import GeneratorConfig, generate_dataset

gen = GeneratorConfig(n=4, height=32, width=48)
train = generate_dataset(range(12), gen)
test = generate_dataset(range(1000, 1004), gen)

s = train[0]
print(f"scene 0: {s.images.shape[0]} frames of {s.images.shape[1]}x{s.images.shape[2]}, "
      f"{len(s.world.static_obstacles)} obstacles, command {s.nav_command}")

# the ground-truth future is collision-free and on the road by construction
gt = toy_pdms(s.future_traj, s.world, s.future_traj, t0=(s.n - 1) * s.dt, dt=s.dt)
print(f"GT trajectory: NC={gt.nc:.0f} DAC={gt.dac:.0f} PDMS={gt.pdms:.3f}")

cfg = load_config(overrides=[{
    "model": {"encoder": {"image_size": [32, 48], "channels": 32, "depth": 2, "heads": 2},
              "dit": {"depth": 1, "heads": 2, "traj_depth": 1, "frame_steps": 10}},
    "batch_size": 4, "max_steps": 20,
}])

stage1 = train_stage1(cfg, train)
print(f"stage 1: total loss {stage1.reports[0].total:.3f} -> {stage1.reports[-1].total:.3f}, "
      f"test depth MAE {depth_mae(stage1.model, test):.2f} m")

stage2 = train_stage2(cfg, stage1.model, train)
print(f"stage 2: l_gen {stage2.reports[0].l_gen:.3f} -> {stage2.reports[-1].l_gen:.3f}")

report = evaluate_model(stage2.model, test, k=3)
print(report.to_json())
