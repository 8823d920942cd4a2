"""Every augmentation stage applied to one synthetic image, dumped as PPMs.

Writes the original plus one file per stage (crop, flip, brightness /
saturation / contrast jitter, PCA color noise) and a few full-pipeline
draws into demos/gallery/.

Run: python demos/augmentation_gallery.py
"""

from pathlib import Path

import numpy as np

from branchnet import (AugmentConfig, RngStream, SyntheticSpec,
                       augment_pipeline, color_jitter, fit_pca_basis,
                       generate_synthetic, horizontal_flip, pca_noise,
                       random_crop, write_ppm)
from branchnet.augment import apply_brightness, apply_contrast, apply_saturation


def main():
    out_dir = Path(__file__).parent / "gallery"
    out_dir.mkdir(exist_ok=True)

    data = generate_synthetic(
        SyntheticSpec(num_classes=6, samples_per_class=4, image_size=48,
                      noise_std=12.0), seed=42)
    image = data.images[5].astype(np.float64)
    write_ppm(out_dir / "original.ppm", image)

    stream = RngStream(global_seed=11, epoch=0, sample_index=0)
    write_ppm(out_dir / "crop.ppm", random_crop(image, (36, 36), stream))
    write_ppm(out_dir / "flip.ppm", horizontal_flip(image, stream, p=1.0))
    write_ppm(out_dir / "brightness.ppm", np.clip(apply_brightness(image, 1.35), 0, 255))
    write_ppm(out_dir / "saturation.ppm", np.clip(apply_saturation(image, 0.2), 0, 255))
    write_ppm(out_dir / "contrast.ppm", np.clip(apply_contrast(image, 1.6), 0, 255))
    write_ppm(out_dir / "jitter_all.ppm", color_jitter(image, stream, strength=0.4))

    basis = fit_pca_basis(data.images)
    print("fitted color-covariance eigenvalues:", np.round(basis.eigenvalues, 1))
    write_ppm(out_dir / "pca_noise.ppm", pca_noise(image, basis, stream, sigma=0.15))

    config = AugmentConfig(crop_height=36, crop_width=36, flip_probability=0.5,
                           jitter_strength=0.4, pca_sigma=0.1,
                           channel_means=np.zeros(3), pca_basis=basis)
    for i in range(4):
        draw = RngStream(global_seed=11, epoch=0, sample_index=i)
        pixels = augment_pipeline(image, config, draw, skip_normalize=True)
        write_ppm(out_dir / f"pipeline_{i}.ppm", pixels)

    print(f"wrote {len(list(out_dir.glob('*.ppm')))} images to {out_dir}/")


if __name__ == "__main__":
    main()
