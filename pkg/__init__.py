"""
IAV Coop Sim - A deterministic warehouse simulator for cooperating industrial autonomous vehicles.
"""

__version__ = "1.0.0"
__author__ = "IAV Coop Sim Team"
__description__ = "Deterministic IAV fleet simulator with CAM/DENM/CPM/MCM messaging and intersection arbitration"
