"""Configuration, data loading, statistics and experiment harnesses behind the ``srnet`` CLI."""
