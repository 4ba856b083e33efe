"""Actor-critic training with implicit hypergradients on small in-repo environments."""
