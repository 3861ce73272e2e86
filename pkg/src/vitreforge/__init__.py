"""Turn a plain ViT checkpoint into a hierarchical ViT by weight surgery."""
from .checkpoint import Archive, PlainVitSchema, load_archive, save_archive, validate_plain_vit
from .errors import (ConfigError, CorruptionError, DimensionError, FormatError, SchemaError,
                     UnsupportedDtypeError, VitreforgeError)
from .hier import (FeaturePyramid, HierModel, HierVitConfig, detection_attention_plan, forward_hier,
                   merge_model, overlap_patch_embed, rel_pos_index, reuse_audit, stage_downsample, surgery,
                   window_attention, window_partition, window_reverse)
from .plain import PlainVitModel, forward_plain, global_attention, patch_embed_plain, vit_block
from .reparam import BranchedDownsampler, MergedDownsampler, merge, pool_as_conv, verify_merge
from .synthetic import make_nano, make_plain_vit, make_vit_b, sincos_pos_embed

__version__ = "0.1.0"
