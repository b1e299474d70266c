"""Experiment recipes, configuration, persistence and the command-line front end."""
