# presets/maze_preset.py
# One long PD-wanderer trajectory through the U-maze, relabelled starts around 'S'.
MAZE_PRESET = {
    "seed": 0,
    "output_dir": "runs/point_maze",
    "env": {"name": "point_maze", "max_steps": 300},
    "generator": {
        "n_expert": 1,
        "n_random": 0,
        "max_steps": 10000,
        "controller": {"kp": 10.0, "kd": 1.0, "waypoint_tolerance": 0.2, "expert_force": 1.0},
    },
    "dynamics": {
        "n_trained": 7,
        "n_kept": 5,
        "hidden_sizes": [200, 200, 200, 200],
        "max_epochs": 40,
        "optimizer": "adam",
        "learning_rate": 1e-3,
    },
    "bats": {
        "n_iterations": 10,
        "m_samples_per_iter": 200,
        "stitch_budget": 500,
        "max_stitch_len": 1,
        "neighbor_mode": "radius",
        "neighbor_radius": 0.225,
        "delta": 0.425,
        "penalty_coefficient": 20.0,
        "discount": 0.99,
        "boltzmann_T": 0.25,
        "cem": {"population": 100, "elite_fraction": 0.1, "iterations": 5, "action_bounds": [[-1.0, 1.0], [-1.0, 1.0]]},
    },
    "clone": {
        "hidden_sizes": [64, 64],
        "batch_updates": 5000,
        "return_threshold": 100.0,
        "harvest_horizon": 300,
    },
    "evaluation": {"n_episodes": 20, "final_window": 50},
    "metric": "euclidean",
    "start_region": {"kind": "points", "points": [[1.5, 3.5]], "radius": 0.5, "dims": [0, 1]},
}
