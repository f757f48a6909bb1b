"""
Services module for the FVIN toolkit
Trajectory and checkpoint persistence, run artifacts and the experiment commands behind the CLI
"""
