""" Gnuplot script emission for rasters and RMSE tables. """

import os
from typing import Sequence

from sensing.src.helpers import configure_logger

logger = configure_logger(__name__)

_PREAMBLE = """\
set datafile separator ','
set terminal pngcairo size 900,700
"""


def raster_plot(  # pylint: disable=R0913
    csv_name: str, title: str, x_min: float, y_min: float, dx: float, dy: float
) -> str:
    """Gnuplot commands drawing one headered CSV raster as an image."""
    png_name = os.path.splitext(csv_name)[0] + ".png"
    return (
        f"set output '{png_name}'\n"
        f"set title '{title}'\n"
        "set xlabel 'x [m]'\nset ylabel 'y [m]'\nset size ratio -1\n"
        f"plot '{csv_name}' skip 2 matrix using "
        f"({x_min!r}+$1*{dx!r}):({y_min!r}+$2*{dy!r}):3 with image notitle\n"
        "unset size\n"
    )


def rmse_plot(csv_name: str, n_bs_values: Sequence[int]) -> str:
    """Gnuplot commands drawing position RMSE and PEB against waypoint x."""
    png_name = os.path.splitext(csv_name)[0] + "_position.png"
    curves = []
    for n_bs in n_bs_values:
        curves.append(
            f"'{csv_name}' using ($3=={n_bs}?$1:1/0):8 with linespoints "
            f"title 'RMSE, {n_bs} BS'"
        )
        curves.append(
            f"'{csv_name}' using ($3=={n_bs}?$1:1/0):9 with lines dashtype 2 "
            f"title 'PEB, {n_bs} BS'"
        )
    return (
        f"set output '{png_name}'\n"
        "set title 'Position RMSE and PEB'\n"
        "set xlabel 'waypoint x [m]'\nset ylabel 'error [m]'\n"
        "set logscale y\nset key top left\n"
        "plot " + ", \\\n     ".join(curves) + "\n"
        "unset logscale y\n"
    )


def write_script(path: str, sections: Sequence[str]) -> str:
    """Writes a gnuplot script made of the given plot sections."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(_PREAMBLE)
        for section in sections:
            f.write("\n" + section)
    logger.info("Plot script written to %s", path)
    return path
