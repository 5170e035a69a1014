"""Cross-validation training, augmentation, ensembling and ablation grids."""
