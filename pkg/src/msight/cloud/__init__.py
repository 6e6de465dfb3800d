"""Cloud side: ingestion gateway, pub/sub dispatcher, storage sink."""
from .gateway import Gateway, IngestClient
from .pubsub import CloudEnvelope, DeliveryReport, Dispatcher, Subscription
from .storage import DiskFull, StorageSink, StorageUnavailable, replay_file, replay_topic

__all__ = ["Gateway", "IngestClient", "CloudEnvelope", "DeliveryReport", "Dispatcher", "Subscription",
           "DiskFull", "StorageSink", "StorageUnavailable", "replay_file", "replay_topic"]
