"""
Augmentation gallery
--------------------

Applies each of the eleven waveform augmentations to the same test clip
(a tone plus click track, so both harmonic and percussive effects are
audible) and writes one wav per transform into ./demo_augmented/.
Every transform keeps the sample count and is reproducible from its seed.
"""

from pathlib import Path

import numpy as np

from tinysound import augment
from tinysound.audio_io import AudioClip, write_wav

SR = 44100

t = np.arange(2 * SR) / SR
tone = 0.5 * np.sin(2 * np.pi * 523.25 * t)
clicks = np.zeros_like(tone)
clicks[:: SR // 4] = 0.9
signal = np.clip(tone + clicks, -1.0, 1.0)

out_dir = Path("demo_augmented")
out_dir.mkdir(exist_ok=True)
write_wav(out_dir / "original.wav", AudioClip(signal, SR))

for i, (kind, transform) in enumerate(augment.AUGMENTATIONS.items()):
    rng = np.random.default_rng(100 + i)
    augmented = transform(signal, rng)
    peak = np.max(np.abs(augmented))
    if peak > 1.0:
        augmented = augmented / peak
    write_wav(out_dir / f"{kind}.wav", AudioClip(augmented, SR))
    rms_in = np.sqrt(np.mean(signal**2))
    rms_out = np.sqrt(np.mean(augmented**2))
    print(f"{kind:24s} rms {rms_in:.3f} -> {rms_out:.3f}")

# The pipeline applies each augmentation independently with its probability.
specs = augment.default_pipeline(probability=0.3)
chained = augment.apply_pipeline(signal, specs, np.random.default_rng(7))
write_wav(out_dir / "pipeline_p30.wav", AudioClip(np.clip(chained, -1, 1), SR))
print(f"\npipeline (p=0.3 each) -> {out_dir / 'pipeline_p30.wav'}")
print(f"all files in {out_dir}/")
