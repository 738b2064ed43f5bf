"""Entity-aligned video recognition on a small numpy autodiff core."""
from .adapter import ALTModel, video_representation
from .config import TrainConfig
from .corpus import Corpus, EntityRecord, build_corpus, embed_entities, encode_text
from .encoder import RegionEncoder
from .errors import (AltError, ContractError, IntegrityError, NumericError, ParameterError,
                     ParseError, ShapeError, ValidationError)
from .flops import ModelGeometry, count_flops, r_sweep
from .kernels import BACKEND
from .synthetic import DatasetSpec, alignment_precision, gen_dataset, load_dataset
from .training import evaluate, load_checkpoint, save_checkpoint, train, zero_shot_eval

__version__ = "0.1.0"
