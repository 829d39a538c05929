"""
Simulation domain for IAV Coop Sim: wire codec, traffic plan, perception,
per-vehicle protocol, engine, scenario files and metrics.
"""
