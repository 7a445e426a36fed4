"""Hierarchical integrated thermal and energy management toolkit for a
power-split hybrid electric vehicle.

Subpackages:

* ``plant``     - control-oriented powertrain + thermal forward model
* ``traffic``   - spatiotemporal speed field from probe trajectories
* ``dcr``       - unsupervised driving-condition recognition (PCA + GMM)
* ``predictor`` - condition-aware attention speed forecaster
* ``nlp``       - optimal-control transcription and NLP solver
* ``control``   - global reference planner, MPC tracker, baselines
* ``harness``   - scenario runner, metrics, comparison reports, CLI
"""

__version__ = "0.1.0"
