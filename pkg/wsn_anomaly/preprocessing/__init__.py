from .adjacency import build_adjacency
from .align import IBRL_COLUMN_MAP, align_timestamps, read_records_csv
from .injection import inject_anomalies
from .synthetic import generate_records
from .windows import build_samples, downsample_windows, split_dataset, zscore_normalize
