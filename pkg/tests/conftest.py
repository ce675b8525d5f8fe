from __future__ import annotations

import pytest

HEADER = "DeviceId,TimeStamp,GPSDirection,GPSSpeed,EventDescription\n"

CLEAN_TRIP = HEADER + """\
2022123,07/16/2018 11:51:48,0,0,KEY OFF
2022123,07/16/2018 11:55:28,0,2,KEY ON
2022123,07/16/2018 11:56:28,0,2,POSITION IN TIME
2022123,07/16/2018 11:57:28,132,50,POSITION IN TIME
2022123,07/16/2018 11:58:28,144,60,POSITION IN TIME
2022123,07/16/2018 11:59:28,134,16,POSITION IN TIME
2022123,07/16/2018 12:00:28,32,21,POSITION IN TIME
2022123,07/16/2018 12:01:28,28,39,POSITION IN TIME
2022123,07/16/2018 12:02:28,38,35,POSITION IN TIME
2022123,07/16/2018 12:03:28,42,29,POSITION IN TIME
2022123,07/16/2018 12:04:28,38,11,POSITION IN TIME
2022123,07/16/2018 12:05:28,56,14,POSITION IN TIME
2022123,07/16/2018 12:06:28,0,4,POSITION IN TIME
2022123,07/16/2018 12:07:28,0,3,POSITION IN TIME
2022123,07/16/2018 12:08:28,0,1,POSITION IN TIME
2022123,07/16/2018 12:09:28,0,2,POSITION IN TIME
2022123,07/16/2018 12:10:28,0,2,POSITION IN TIME
2022123,07/16/2018 12:10:45,0,1,KEY OFF
2022123,07/17/2018 13:27:16,0,1,KEY ON
"""

OUT_OF_ORDER = HEADER + """\
2022123,07/19/2018 18:56:21,296,38,POSITION IN TIME
2022123,07/19/2018 18:57:21,276,30,POSITION IN TIME
2022123,07/19/2018 19:04:21,254,85,POSITION IN TIME
2022123,07/19/2018 19:05:21,258,79,POSITION IN TIME
2022123,07/19/2018 19:06:21,258,79,POSITION IN TIME
2022123,07/19/2018 19:07:21,254,58,POSITION IN TIME
2022123,07/19/2018 19:08:21,236,64,POSITION IN TIME
2022123,07/19/2018 18:58:21,270,38,POSITION IN TIME
2022123,07/19/2018 18:59:21,246,42,POSITION IN TIME
2022123,07/19/2018 19:00:21,246,61,POSITION IN TIME
2022123,07/19/2018 19:01:21,246,79,POSITION IN TIME
2022123,07/19/2018 19:02:21,236,49,POSITION IN TIME
2022123,07/19/2018 19:03:21,252,81,POSITION IN TIME
2022123,07/19/2018 19:09:21,272,49,POSITION IN TIME
"""

CALIBRATION = HEADER + """\
2022123,04/02/2019 18:09:33,0,0,KEY ON
2022123,04/02/2019 18:09:37,0,0,FIX GPS OK
2022123,04/02/2019 18:10:34,266,73,POSITION IN TIME
2022123,04/02/2019 18:11:34,264,85,POSITION IN TIME
2022123,04/02/2019 18:12:34,326,95,POSITION IN TIME
2022123,04/02/2019 18:20:19,0,0,KEY OFF
"""


@pytest.fixture
def clean_trip_csv():
    return CLEAN_TRIP


@pytest.fixture
def out_of_order_csv():
    return OUT_OF_ORDER


@pytest.fixture
def calibration_csv():
    return CALIBRATION


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; the line is printed in the summary."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record
