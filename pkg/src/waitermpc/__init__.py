"""Whole-body MPC for balancing objects on a tray carried by a mobile manipulator."""

import os

import jax

# All model functions are differentiated with JAX; single precision is not
# accurate enough for the finite-difference and KKT tolerances used here.
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platforms", "cpu")

# Compiled model functions are cached on disk; the first run of a new problem
# structure pays the compile time once.
_cache = os.environ.get("WAITERMPC_JAX_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "waitermpc-jax"))
if _cache:
    jax.config.update("jax_compilation_cache_dir", _cache)
    jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)

__version__ = "0.1.0"
