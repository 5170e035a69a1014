"""Write heatmaps as NIfTI volumes and axial PNG montages."""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from models import Case, Heatmap, Modality  # noqa: E402
from utils.storage import write_nifti  # noqa: E402


logger = logging.getLogger(__name__)


def montage_slices(depth: int, count: int) -> np.ndarray:
    """Evenly spaced axial slice indices, skipping the outermost planes."""
    count = min(count, depth)
    return np.unique(np.linspace(0, depth - 1, count + 2)[1:-1].round().astype(int)) if depth > 2 else np.arange(depth)


def render_montage(heatmap: Heatmap, background: np.ndarray, path: Union[str, Path],
                   alpha: float = 0.4, slices: int = 8, title: Optional[str] = None) -> Path:
    """Overlay the heatmap on ``background`` for a row of axial slices and save as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    indices = montage_slices(background.shape[0], slices)

    fig, axes = plt.subplots(1, len(indices), figsize=(2.2 * len(indices), 2.6), squeeze=False)
    vmax = float(np.abs(heatmap.values).max()) or 1.0
    cmap = "jet" if heatmap.method == "gradcam" else "coolwarm"
    vmin = 0.0 if heatmap.method == "gradcam" else -vmax
    for ax, z in zip(axes[0], indices):
        ax.imshow(background[z].T, cmap="gray", origin="lower")
        ax.imshow(heatmap.values[z].T, cmap=cmap, alpha=alpha, vmin=vmin, vmax=vmax, origin="lower")
        ax.set_title(f"z={z}", fontsize=8)
        ax.axis("off")
    fig.suptitle(title or f"{heatmap.method} ({heatmap.layer or heatmap.task.value}, class {heatmap.target_class})",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_heatmap(heatmap: Heatmap, case: Case, out_dir: Union[str, Path], alpha: float = 0.4,
                 slices: int = 8) -> Tuple[Path, Path]:
    """Save ``<case>_<method>.nii.gz`` and a PNG montage over the FLAIR (or first available) volume."""
    out_dir = Path(out_dir)
    stem = f"{case.case_id}_{heatmap.method}" + (f"_{heatmap.layer}" if heatmap.layer else "")
    nifti_path = write_nifti(heatmap.values.astype(np.float32), out_dir / f"{stem}.nii.gz", case.spacing)

    modality = Modality.FLAIR if Modality.FLAIR in case.volumes else case.modalities[0]
    png_path = render_montage(heatmap, case.volumes[modality].data, out_dir / f"{stem}.png",
                              alpha=alpha, slices=slices)
    logger.info(f"Saved heatmap to {nifti_path} and {png_path}")
    return nifti_path, png_path
