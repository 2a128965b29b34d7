"""Neural Green's operators for parametric diffusion on the unit square."""
