"""
HLSIRM - Command Package
"""
from commands import analyze as analyze_command
from commands import fit as fit_command
from commands import simulate as simulate_command

COMMANDS = [simulate_command, fit_command, analyze_command]

__all__ = [
    "COMMANDS",
    "simulate_command",
    "fit_command",
    "analyze_command",
]
