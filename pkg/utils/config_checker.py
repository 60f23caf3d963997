# Combination checks run before an experiment starts


def check_experiment_config(cfg) -> list:
    issues = []

    if not cfg.dataset.exists():
        issues.append(f"dataset directory {cfg.dataset} not found")

    if cfg.patch is not None and cfg.patch.mode != "cpc" and cfg.patch.pad_policy != "zero":
        issues.append(f"pad_policy={cfg.patch.pad_policy} applies only to cpc patching, not {cfg.patch.mode}")

    if cfg.reducer == "pca" and cfg.cae_epochs is not None:
        issues.append("cae_epochs applies only to autoencoder reducers")

    if cfg.ensemble.num_trials != cfg.split.num_trials:
        issues.append(
            f"ensemble trials ({cfg.ensemble.num_trials}) disagree with split trials ({cfg.split.num_trials})"
        )

    if cfg.model == "unet" and cfg.ensemble.weights is not None:
        issues.append("explicit ensemble weights need model=ceunet")

    if cfg.parallel_trials > cfg.split.num_trials:
        issues.append(f"parallel_trials={cfg.parallel_trials} exceeds the {cfg.split.num_trials} trials")

    return issues
