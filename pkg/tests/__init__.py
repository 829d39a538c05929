"""
Test package for IAV Coop Sim.
"""
