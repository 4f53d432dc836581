"""File-based batch inference sidecar for crop/text embeddings and segmentation."""

from .backends import ClipSamBackend, ModelBackend, StubBackend
from .protocol import (BatchRequest, BatchResponse, ItemStatus, ProtocolError,
                       atomic_write_json, claim_request, pending_requests)
from .server import SidecarServer

__version__ = "0.1.0"
