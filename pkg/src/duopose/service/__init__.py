"""HTTP service exposing the reconstruction pipeline."""
