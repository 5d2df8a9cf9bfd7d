"""Numerical workbench for paralinearized semilinear parabolic equations and
the inverse source problem with boundary and single-time interior data.

Modules
-------
grid          uniform box grids, sine-spectral and finite-difference operators
dyadic        Littlewood-Paley blocks and Besov norms
paraproduct   Bony decomposition, commutators, paralinearization
forward       IMEX solver, observations, the differentiated equation
estimates     energy bookkeeping on the observation window
carleman      weights, conjugated operator, Carleman ratios
inverse       direct slice, Tikhonov with adjoint gradients, stability fit
cli           batch front end
"""
__version__ = "0.1.0"
