TEXT_LOADING = "📂 Loading dataset {path}"
TEXT_REDUCING = "🔻 Reducing spectra with {method} to {dim} features"
TEXT_PATCHING = "🧩 Patching with mode {mode}, n={n}"
TEXT_CLUSTERING = "🔀 Clustering {count} training pixels with {method}, k={k}"
TEXT_TRAINING_SUBNET = "🧠 Training U-Net {index}/{total} on {count} samples (ω={weight:.4f})"
TEXT_TRAINING_UNET = "🧠 Training single U-Net on {count} samples"
TEXT_TRIAL_DONE = "✅ Trial {trial}: overall accuracy {accuracy:.4f}"
TEXT_EXPERIMENT_DONE = "✅ {name}: mean accuracy {mean:.4f} ± {std:.4f} over {trials} trials"
TEXT_EXPERIMENT_FAILED = "⚠️ {name} failed in stage {stage}: {cause}"
TEXT_GRID_CELL_FAILED = "⚠️ Grid cell {method}, k={k} is infeasible: {cause}"
TEXT_NO_REPORTS = "ℹ️ No reports to emit, nothing written"
TEXT_OUTPUTS_WRITTEN = "📄 Wrote {count} output files to {path}"
TEXT_PARALLEL_TRIALS = "⚠️ Trials run concurrently, timings are not comparable"
TEXT_PARALLEL_SUBNETS = "⚠️ Sub-networks train concurrently, results are not bit-reproducible"
TEXT_CACHE_HIT = "♻️ Reusing cached features for {key}"
TEXT_INTERRUPTED = "Harness stopped"
TEXT_NOTE_PARALLEL_TRIALS = "trials ran concurrently; timings are not comparable and results are not bit-reproducible"
TEXT_NOTE_PARALLEL_SUBNETS = "sub-networks trained concurrently; results are not bit-reproducible"
