"""Central jax import point.

Enables 64-bit mode before any array is created; every module in the
package that needs jax must import it from here so the flag is set
exactly once, up front. Estimation is meaningless in float32: the
spline and CDF compositions lose monotonicity near saturation.
"""

import jax

jax.config.update("jax_enable_x64", True)

import jax.flatten_util  # noqa: E402, F401  (registers jax.flatten_util)
import jax.numpy as jnp  # noqa: E402
from jax.scipy import special as jspecial  # noqa: E402

__all__ = ["jax", "jnp", "jspecial"]
