"""Hyperbolic entropy experiments for singular holomorphic foliations of C^2.

Modules: ``disk_geometry`` (Poincare disk and its automorphisms),
``prescribed_steps`` (band schedules and Cantor-style sets), ``foliation_core``
(vector fields, flows, flow boxes), ``uniformization`` (leaf uniformizations),
``harmonic_measure`` (the averaged measures m_{x,R}), ``entropy_lab`` (Bowen
distances, admissible sets, local entropies) and ``cli``.
"""

__version__ = "0.1.0"
