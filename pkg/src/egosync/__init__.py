"""Self-supervised first/third-person view embeddings and their use for egopose.

Modules: :mod:`~egosync.skeleton` (canonical skeletons and the error metric),
:mod:`~egosync.data` (manifests and pair mining), :mod:`~egosync.synthetic`
(seeded paired-view generator), :mod:`~egosync.flow` (frame stacks),
:mod:`~egosync.embed` (semi-Siamese network and training),
:mod:`~egosync.transfer` (pose vocabulary and regressors),
:mod:`~egosync.analysis` (PCA, CCA, transversals) and :mod:`~egosync.cli`.
"""

from .exceptions import (ArtifactError, ConfigError, EgoSyncError, MissingArtifact,
                         NumericError)

__version__ = "0.1.0"

__all__ = ["ArtifactError", "ConfigError", "EgoSyncError", "MissingArtifact", "NumericError",
           "__version__"]
