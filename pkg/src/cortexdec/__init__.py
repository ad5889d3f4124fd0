"""Subject-independent EEG word decoding at desk scale.

Preprocessing (band-pass, epoching, baseline correction), a skip-connected
1-D convolutional classifier over 13 spoken-word classes, Adam training
with early stopping, subject-grouped cross-validation and a skip-connection
ablation harness, plus a synthetic EEG corpus generator. Exposed both as a
library, a FastAPI service (``cortexdec.service``) and a thin CLI client
(``cortexdec``).
"""

__version__ = "0.1.0"
