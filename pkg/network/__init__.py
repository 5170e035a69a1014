"""Network components: backbone, TAFE, CMD, fusion and checkpoints."""
