"""Unit system and physical constants.

Base units everywhere in this package: length in angstrom, energy in eV,
mass in amu, time in femtoseconds.  Velocities are A/fs, forces eV/A,
stress eV/A^3.  Every derived conversion constant lives here so the unit
system is auditable in one place.
"""

# CODATA 2018 values.
BOLTZMANN_EV_K = 8.617333262e-5  # eV / K
_EV_J = 1.602176634e-19          # J per eV
_AMU_KG = 1.66053906660e-27      # kg per amu

# 1 amu * (A/fs)^2 expressed in eV.  Kinetic energy in base units times
# this constant is in eV.
MASS_VEL2_TO_EV = _AMU_KG * 1e10 / _EV_J

# Acceleration conversion: force [eV/A] / mass [amu] times this constant
# is acceleration in A/fs^2.  Exactly the inverse of MASS_VEL2_TO_EV; the
# kick term of the integrator folds it in.
FORCE_OVER_MASS_TO_ACC = 1.0 / MASS_VEL2_TO_EV
