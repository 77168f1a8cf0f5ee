"""Two-type doubly symmetric critical CBI processes: simulation, conditional
least squares estimation, moment formulas and limit laws."""

__version__ = "0.1.0"
