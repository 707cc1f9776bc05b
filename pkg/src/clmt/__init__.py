"""clmt: paired biosignal tokenizer with discrete latent downstream heads.

Library layout mirrors the pipeline: `synthgen` produces paired ECG/PPG
datasets, `tokenizer` + `rvq` build the shared discrete latent space,
`latent_tasks` trains the cross-modal translator and the super-resolution
completion head against the frozen tokenizer, `baselines` and `metrics`
provide the comparison systems and the evaluation stack, and `cli` ties
everything into reproducible commands.
"""

__version__ = "0.1.0"
