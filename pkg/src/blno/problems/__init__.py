"""Experiment generators: quadratic bilevel family, one-step game, random-MLP Hessians."""
