"""Shared fixtures: the published Nd:YSO site-I tensors and field point, and
session-cached synthetic roadmaps (synthesis is the expensive step)."""

import numpy as np
import pytest

from endorlab import FieldVector, SpinSystem, synthesize_roadmap

# Published site-I interaction tensors in the (D2, b, D1) frame.
G_MATRIX = np.array([[-1.03, -2.48, 0.44],
                     [-2.49, -2.19, -0.14],
                     [0.44, -0.14, 1.39]])
A_MATRIX_MHZ = np.array([[495.7, 687.4, -232.8],
                         [687.4, 751.8, 165.8],
                         [-232.8, 165.8, -338.3]])
G_SYM = (G_MATRIX + G_MATRIX.T) / 2

# Stated principal values of the published tensors.
G_PRINCIPAL = (-4.16, 0.68, 1.65)
A_PRINCIPAL_MHZ = (1323.0, -520.0, -137.0)

# Orientation of B0 for the reference spectra, and the studied field points.
B0_THETA_DEG = -2.24
B0_PHI_DEG = -66.35
B0_HYPERFINE_MT = 402.7
B0_EVEN_ISOTOPE_MT = 458.2
F_MW_GHZ = 9.56

SPECTRUM_WINDOW_MT = (300.0, 570.0)
FIT_WINDOW_MT = (250.0, 700.0)


@pytest.fixture(scope="session")
def nd_system():
    return SpinSystem(g_tensor=G_MATRIX, a_tensor_mhz=A_MATRIX_MHZ,
                      nuclear_spin=3.5, label="143Nd:YSO site I")


@pytest.fixture(scope="session")
def nd_system_sym():
    return SpinSystem(g_tensor=G_SYM, a_tensor_mhz=A_MATRIX_MHZ,
                      nuclear_spin=3.5, label="143Nd:YSO site I (sym g)")


@pytest.fixture(scope="session")
def b_hyperfine():
    return FieldVector(B0_HYPERFINE_MT, B0_THETA_DEG, B0_PHI_DEG)


@pytest.fixture(scope="session")
def roadmap_clean():
    return synthesize_roadmap(G_SYM, A_MATRIX_MHZ, F_MW_GHZ, FIT_WINDOW_MT)


@pytest.fixture(scope="session")
def roadmap_noisy():
    return synthesize_roadmap(G_SYM, A_MATRIX_MHZ, F_MW_GHZ, FIT_WINDOW_MT,
                              noise_mT=1.84, seed=42)
