from _common import jobs, ready, reply

ready()
for job in jobs():
    reply(job, [{"x": 1.0, "y": float(job["height"]), "score": 0.5, "label": "mitotic_figure"}])
