"""Occlusion sensitivity, Grad-CAM and CMD attention maps."""
