"""Synthetic patient-visit records from per-diagnosis variational autoencoders."""

from .numeric import RandomSource, derive_child_seed, seeded_rng
from .records import (
    DataSchema,
    PatientRecord,
    ToySpec,
    default_toy_spec,
    encode_record,
    format_records,
    generate_toy_dataset,
    infer_schema,
    parse_records,
    partition_by_diagnosis,
)
from .vae import VaeConfig, VaeModel, generate, init_model, load_model, save_model, train

__version__ = "0.1.0"
