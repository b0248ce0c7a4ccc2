"""Descriptor networks, the triplet loss and training."""
from .checkpoint import load_checkpoint, save_checkpoint
from .loss import batch_triplet_loss, triplet_loss
from .nets import (ImageNetShape, PointNetShape, embed_image, embed_images, embed_points, embed_volumes,
                   init_image_params, init_point_params)
from .train import TrainConfig, TrainResult, Triplet, make_triplets, train

__all__ = [
    "ImageNetShape", "PointNetShape", "TrainConfig", "TrainResult", "Triplet", "batch_triplet_loss",
    "embed_image", "embed_images", "embed_points", "embed_volumes", "init_image_params", "init_point_params",
    "load_checkpoint", "make_triplets", "save_checkpoint", "train", "triplet_loss",
]
