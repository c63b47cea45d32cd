"""Sub-metre DEM reconstruction from pushbroom stereo imagery.

Library layout mirrors the processing chain: `geom` (camera model), `ingest`
(file formats), `pairsel` (stereo pair screening), `adjust` (bundle
adjustment), `densematch` (disparity), `recon` (triangulation + gridding),
`align` (ICP + bias removal), `mosaic` (void filling + feathering),
`validate` (metrics), `synth` (test scenes) and `pipeline`/`cli`
(orchestration).
"""

__version__ = "0.1.0"
