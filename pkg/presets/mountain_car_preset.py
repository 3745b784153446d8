# presets/mountain_car_preset.py
MOUNTAIN_CAR_PRESET = {
    "seed": 0,
    "output_dir": "runs/mountain_car",
    "env": {"name": "mountain_car"},
    "generator": {
        "n_expert": 5,
        "n_random": 100,
        "max_steps": 300,
        "controller": {"expert_force": 1.0},
    },
    "dynamics": {
        "n_trained": 7,
        "n_kept": 5,
        "hidden_sizes": [64, 64, 64],
        "batch_size": 256,
        "max_epochs": 60,
        "patience": 10,
        "optimizer": "adam",
        "learning_rate": 1e-3,
    },
    "bats": {
        "n_iterations": 20,
        "m_samples_per_iter": 100,
        "stitch_budget": 100,
        "max_stitch_len": 5,
        "neighbor_mode": "knn",
        "neighbor_k": 25,
        "delta": 0.05,
        "quantile": 0.8,
        "penalty_coefficient": 20.0,
        "discount": 0.99,
        "boltzmann_T": 0.25,
        "cem": {"population": 200, "elite_fraction": 0.1, "iterations": 5, "action_bounds": [[-1.0, 1.0]]},
    },
    "clone": {
        "hidden_sizes": [256, 256],
        "batch_size": 256,
        "batch_updates": 2000,
        "return_threshold": 50.0,
        "harvest_horizon": 999,
    },
    "evaluation": {"n_episodes": 20, "final_window": 50},
    "metric": "normalized",
}
