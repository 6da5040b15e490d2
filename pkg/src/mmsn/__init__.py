"""EHR-aware masked siamese pretraining for chest X-ray encoders.

Synthetic data, view generation, ViT encoders, the prototype loss, the
pretraining loop and the downstream evaluation protocol.
"""

from .config import RunConfig, load_config
from .data import CONDITIONS, DatasetManifest, EhrRecord, LabelVector, Sample, generate_synthetic_dataset, split_by_patient
from .encoders import ModelConfig, MultimodalMSN, VisionTransformer
from .engine import Checkpoint, PretrainConfig, Pretrainer, load_checkpoint
from .evaluation import ProbeConfig, extract_embeddings, low_data_protocol, run_protocol, train_probe
from .loss import LossConfig, total_loss
from .metrics import MetricReport, auprc, auroc, bootstrap_ci, compare_reports, metric_report, significance_test
from .report import render_table
from .views import ViewConfig, build_view_bundle

__version__ = "0.1.0"
