"""Test-time-adaptive point cloud registration at desk scale.

Pipeline: shared invariant point encoder, feature matching, learned
outlier scoring, weighted Procrustes; three self-supervised auxiliary
tasks drive per-instance test-time adaptation, trained with a
first-order meta-auxiliary loop.
"""
from .geometry import (EvalThresholds, PointCloud, RegistrationResult,
                       RigidTransform, apply_transform, compose, invert,
                       registration_recall, rotation_error,
                       sample_random_transform, translation_error,
                       voxel_downsample)
from .networks import EncoderConfig, ParamPartition, init_partition
from .registration import (CorrespondenceSet, match_features,
                           weighted_procrustes, register)
from .synthdata import (DatasetManifest, DomainProfile, ScenePair,
                        generate_dataset, generate_scene, make_pair,
                        read_dataset, split_dataset, write_dataset)
from .metatrain import (TrainConfig, evaluate, inner_adapt, joint_train,
                        load_checkpoint, meta_train, save_checkpoint,
                        tta_register)

__version__ = "0.1.0"
