"""
Failure-analysis layer: I-V screening, lock-in thermography and current-path comparison
"""
from .iv import IVCurve, IVClassification, classify_iv
from .lockin import LockInSeries, lockin_demodulate
from .hotspots import Hotspot, HotspotCorrelation, detect_hotspot, correlate_hotspot
from .paths import (AnomalyReport, ComparisonConfig, TraceConfig, TracedPath,
                    compare_paths, trace_current)

__all__ = ['IVCurve', 'IVClassification', 'classify_iv',
           'LockInSeries', 'lockin_demodulate',
           'Hotspot', 'HotspotCorrelation', 'detect_hotspot', 'correlate_hotspot',
           'AnomalyReport', 'ComparisonConfig', 'TraceConfig', 'TracedPath',
           'compare_paths', 'trace_current']
