"""Segmentation and classification metrics, ROC analysis and reports."""
