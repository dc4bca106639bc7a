# Domain core: vocabulary, toy world, tensor engine, model and configuration for gapflow.
