import sys

from _common import jobs, ready

ready()
for job in jobs():
    sys.stdout.write("not json\n")
    sys.stdout.flush()
