"""Immune examples: crafting and evaluating perturbations that keep attacks from working."""
