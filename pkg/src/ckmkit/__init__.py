"""Channel knowledge map construction from 3D environmental point clouds.

The toolkit predicts location-tagged channel knowledge (power delay
profiles and received-signal-strength maps) for a fixed transmitter by
combining a geometric point selector over confocal-ellipsoid delay shells
with a learned set-based gain estimator, plus classical baselines
(free-space loss, point-cloud ray tracing, ordinary kriging) and a
synthetic scene laboratory with analytic oracles.
"""

__version__ = "0.1.0"
