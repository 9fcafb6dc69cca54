"""Band selection for hyperspectral imaging: benchmark tables, surrogates, search and a one-shot supernet."""

from .hsi import BandCombination, HsiCube, LabelMap, check_bc, format_bc, load_cube, parse_bc, save_cube

__all__ = ["BandCombination", "HsiCube", "LabelMap", "check_bc", "format_bc", "load_cube", "parse_bc", "save_cube"]
