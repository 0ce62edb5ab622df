"""Physical constants in the unit system used throughout: nm, V, aF, aC."""

# Vacuum permittivity.  With lengths in nm this makes face conductances come
# out in aF, so conductor charges under a 1 V drive are numerically in aF.
EPS0_AF_PER_NM = 8.8541878128e-3

# Elementary charge in attocoulombs (1 aC = 1e-18 C = 1 aF * 1 V).
E_CHARGE_AC = 0.1602176634

# Same, in coulombs, for sheet-density formulas quoted in F/cm^2.
E_CHARGE_C = 1.602176634e-19
