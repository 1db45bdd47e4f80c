# Named presets for training schedules and model settings.

# Full schedule: 6e5 traces, minibatch 128, learning rate divided by ten every 2e5 traces.
full_schedule = {
    "total_traces": 600_000,
    "minibatch": 128,
    "lr_schedule": [(0, 1e-3), (200_000, 1e-4), (400_000, 1e-5)],
}

# Same shape scaled to a CPU afternoon.
desk_schedule = {
    "total_traces": 100_000,
    "minibatch": 64,
    "lr_schedule": [(0, 1e-3), (60_000, 1e-4), (90_000, 1e-5)],
}

# Quick check that training moves at all.
smoke_schedule = {
    "total_traces": 10_000,
    "minibatch": 64,
    "lr_schedule": [(0, 1e-3)],
}

TRAIN_PRESETS = {
    "full": full_schedule,
    "desk": desk_schedule,
    "smoke": smoke_schedule,
}

# Likelihood widths for the magnitude model.
SIGMA_L_PRESETS = {
    "broad": 0.5,
    "sharp": 0.1,
}

# K and repeats for the ESS protocol of each model.
ESS_PROTOCOLS = {
    "magnitude": {"k": 2000, "repeats": 10},
    "circuit": {"k": 20, "repeats": 5},
}
