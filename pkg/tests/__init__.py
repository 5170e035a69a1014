"""Test package for the MTS-UNET toolkit."""
