"""Reference implementation of the detector wire contract.

Wraps a detection model (a deterministic stub by default, or a real
open-vocabulary detector via the registry) behind:

    POST /detect   {"image_b64", "prompt", "box_threshold", "text_threshold",
                    "max_detections"} -> {"boxes", "scores", "labels"}
    GET  /health   -> {"status": "ok", "model": <id>}
"""

__version__ = "0.1.0"
