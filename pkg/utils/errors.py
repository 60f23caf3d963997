class CeuNetError(Exception):
    """Base class for every failure raised by the toolkit"""


class LoadError(CeuNetError):
    pass


class IntegrityError(CeuNetError):
    pass


class DataError(CeuNetError):
    pass


class EmptyDatasetError(CeuNetError):
    pass


class SplitError(CeuNetError):
    pass


class BoundaryError(CeuNetError):
    pass


class DimensionError(CeuNetError):
    pass


class DivergenceError(CeuNetError):
    pass


class SpecError(CeuNetError):
    pass


class LabelError(CeuNetError):
    pass


class MetricError(CeuNetError):
    pass


class ClusteringError(CeuNetError):
    pass


class WeightError(CeuNetError):
    pass


class SmallClusterError(ClusteringError):
    def __init__(self, sizes, min_cluster_size: int):
        self.sizes = [int(s) for s in sizes]
        self.min_cluster_size = min_cluster_size
        super().__init__(
            f"cluster sizes {self.sizes} fall below the minimum of {min_cluster_size} samples"
        )


class ConfigError(CeuNetError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class TrialError(CeuNetError):
    def __init__(self, trial_index: int, cause: Exception):
        self.trial_index = trial_index
        self.cause = cause
        super().__init__(f"trial {trial_index} failed: {cause}")


class StageError(CeuNetError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} stage failed: {cause}")


class OutputError(CeuNetError):
    def __init__(self, path, cause: Exception):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"could not write {self.path}: {cause}")
