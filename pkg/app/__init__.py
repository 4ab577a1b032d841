# Depthcast: differentiable view synthesis and depth/ego-motion forecasting
