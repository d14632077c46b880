"""Physical constants and unit conventions.

Internal unit system: energies and frequencies in MHz, magnetic fields in
mT, temperatures in K, times in s. This keeps Hamiltonian matrix entries
of order 1e2..1e4 and avoids floating-point extremes.
"""

# Planck constant (J s) and Boltzmann constant (J/K), SI defined values.
H_PLANCK = 6.62607015e-34
K_BOLTZMANN = 1.380649e-23

# Bohr magneton over Planck constant, in GHz/T (CODATA). Numerically equal
# in MHz/mT: a 1 mT field with g = 1 contributes 13.9962449 MHz.
BETA_OVER_H_GHZ_PER_T = 13.9962449
BETA_OVER_H_MHZ_PER_MT = BETA_OVER_H_GHZ_PER_T

# h/kB in K per GHz and K per MHz: temperature equivalent of a quantum.
HF_OVER_KB_K_PER_GHZ = H_PLANCK * 1e9 / K_BOLTZMANN
HF_OVER_KB_K_PER_MHZ = H_PLANCK * 1e6 / K_BOLTZMANN
